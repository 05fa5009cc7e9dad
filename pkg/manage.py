#!/usr/bin/env python
"""MagShield command-line utility: synth, train, run, eval, bench (and Django's test)."""
import os
import sys


def main(argv=None) -> int:
    """Run a management command and return its exit code."""
    os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'magshield_project.settings')
    try:
        from django.core.management import execute_from_command_line
    except ImportError as exc:
        raise ImportError(
            "Couldn't import Django. Are you sure it's installed and "
            "available on your PYTHONPATH environment variable? Did you "
            "forget to activate a virtual environment?"
        ) from exc
    try:
        execute_from_command_line(list(argv) if argv is not None else sys.argv)
    except SystemExit as exc:
        code = exc.code
        if code is None:
            return 0
        return code if isinstance(code, int) else 1
    return 0


if __name__ == '__main__':
    sys.exit(main())
