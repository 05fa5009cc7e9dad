#!/usr/bin/env python3
"""
Generate the skeleton table the detector uses to place the six IMUs.

This script only prints JSON; nothing is written unless you redirect it.

Usage:
  python scripts/default_skeleton.py > default_skeleton.json

Optional env:
  SKELETON_SCALE (default: 1.0)  uniform scale for every segment, e.g. 0.9
                                 for a shorter subject

Point MAGSHIELD_SKELETON at the generated file to use it in synth/run/eval.
"""

from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple
import json
import os
import sys
from pathlib import Path


def _scale_from_env() -> float:
    try:
        scale = float((os.getenv("SKELETON_SCALE") or "1.0").strip())
    except ValueError:
        return 1.0
    return scale if scale > 0 else 1.0


DEFAULT_SCALE = _scale_from_env()


@dataclass
class Joint:
    name: str
    parent: Optional[str]
    offset: Tuple[float, float, float]  # meters, in the parent segment frame

    def to_entry(self, scale: float) -> Dict[str, Any]:
        return {"parent": self.parent, "offset": [round(c * scale, 6) for c in self.offset]}


def default_joints() -> Tuple[List[Joint], Dict[str, str]]:
    # Reuse the tables the detector ships with
    project_root = Path(__file__).resolve().parents[1]
    if str(project_root) not in sys.path:
        sys.path.insert(0, str(project_root))
    from shield.detector import DEFAULT_IMU_JOINTS, DEFAULT_JOINTS

    joints = [Joint(name, parent, offset) for name, (parent, offset) in DEFAULT_JOINTS.items()]
    return joints, dict(DEFAULT_IMU_JOINTS)


def build_skeleton(scale: float = DEFAULT_SCALE) -> Dict[str, Any]:
    joints, imus = default_joints()
    return {
        "joints": {j.name: j.to_entry(scale) for j in joints},
        "imus": imus,
    }


def main() -> None:
    print(json.dumps(build_skeleton(), indent=2))


if __name__ == "__main__":
    main()
