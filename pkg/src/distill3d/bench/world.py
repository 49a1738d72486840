"""Scene directories on disk.

Layout per scene: ``cloud.ply`` plus, for every frame k, ``frame_k.ppm``,
``frame_k.ldep``, ``frame_k.labels`` and ``camera_k.txt``.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

from ..cloud import PointCloud
from ..errors import MissingFileError
from ..geom import RgbdFrame
from ..io import (read_camera, read_label_image, read_ldep, read_ply, read_ppm, write_camera,
                  write_label_image, write_ldep, write_ply, write_ppm)
from .synth import SyntheticWorld

_FRAME = re.compile(r"frame_(\d+)\.ldep$")


@dataclass
class SceneDir:
    scene_id: str
    path: Path

    @property
    def frame_ids(self) -> list[int]:
        ids = [int(m.group(1)) for p in self.path.iterdir() if (m := _FRAME.match(p.name))]
        return sorted(ids)

    def cloud(self) -> PointCloud:
        return read_ply(self.path / "cloud.ply")

    def frame(self, k: int) -> RgbdFrame:
        depth = read_ldep(self.path / f"frame_{k}.ldep")
        rgb = read_ppm(self.path / f"frame_{k}.ppm")
        camera = read_camera(self.path / f"camera_{k}.txt")
        labels_path = self.path / f"frame_{k}.labels"
        labels = read_label_image(labels_path, depth.width, depth.height) if labels_path.exists() else None
        return RgbdFrame(rgb, depth, camera, labels=labels, name=f"{self.scene_id}/frame_{k}")

    def frames(self) -> list[RgbdFrame]:
        return [self.frame(k) for k in self.frame_ids]


def write_world(world: SyntheticWorld, root) -> list[Path]:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    out = []
    for scene, frames in zip(world.scenes, world.frames):
        d = root / scene.scene_id
        d.mkdir(exist_ok=True)
        write_ply(d / "cloud.ply", scene.cloud)
        for k, rf in enumerate(frames):
            f = rf.frame
            write_ppm(d / f"frame_{k}.ppm", f.rgb)
            write_ldep(d / f"frame_{k}.ldep", f.depth)
            write_label_image(d / f"frame_{k}.labels", f.labels)
            write_camera(d / f"camera_{k}.txt", f.camera)
        out.append(d)
    return out


def list_scenes(root) -> list[SceneDir]:
    """Scene directories (those holding a ``cloud.ply``) in name order."""
    root = Path(root)
    if not root.is_dir():
        raise MissingFileError(f"no such world directory: {root}")
    return [SceneDir(p.name, p) for p in sorted(root.iterdir()) if (p / "cloud.ply").is_file()]
