"""Shared plumbing for the shield management commands."""

from __future__ import annotations

import logging
from pathlib import Path

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from shield.exceptions import MagShieldError
from shield.pipeline import PipelineConfig

logger = logging.getLogger(__name__)


class ShieldCommand(BaseCommand):
    """Subclasses implement :meth:`run`; library and I/O errors become ``CommandError`` (exit 1)."""

    def handle(self, *args, **options):
        try:
            return self.run(**options)
        except CommandError:
            raise
        except (MagShieldError, OSError) as exc:
            logger.debug("%s failed", self.__class__.__module__, exc_info=True)
            raise CommandError(str(exc)) from exc

    def run(self, **options):
        raise NotImplementedError

    @staticmethod
    def threads() -> int:
        return max(1, int(getattr(settings, "MAGSHIELD_THREADS", 1)))

    @staticmethod
    def load_config(path: str | None) -> PipelineConfig:
        if path:
            return PipelineConfig.load(path)
        rate = float(getattr(settings, "MAGSHIELD_SAMPLE_RATE", 100.0))
        skeleton = getattr(settings, "MAGSHIELD_SKELETON", None)
        data = {"sample_rate": rate}
        if skeleton and Path(skeleton).is_file():
            data["skeleton"] = str(skeleton)
        return PipelineConfig.from_dict(data)
