"""Multi-view datasets in memory and on disk.

Directory layout::

    cameras.json          list of camera dicts (see ``Camera.to_dict``)
    images/NNN.png        8-bit RGB training images
    depth/NNN.pfm         optional float depth maps (camera-frame z)
    meta.json             {"views": [...], "reference_view": id, ...}
    mesh.obj              optional host mesh for bound Gaussians
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import Camera, load_cameras, save_cameras
from .io import read_pfm, read_png, write_pfm, write_png


class DatasetError(ValueError):
    pass


@dataclass
class ViewDataset:
    cameras: list
    images: list
    depths: list | None = None
    reference_view: int = 0
    view_ids: list = field(default=None)

    def __post_init__(self):
        if self.view_ids is None:
            self.view_ids = list(range(len(self.cameras)))
        self.view_ids = [int(v) for v in self.view_ids]

    def __len__(self) -> int:
        return len(self.cameras)

    def index_of(self, view_id: int) -> int:
        try:
            return self.view_ids.index(int(view_id))
        except ValueError:
            raise DatasetError(f"unknown view id {view_id}; available: {self.view_ids}") from None

    def validate(self) -> None:
        if len(self.cameras) == 0:
            raise DatasetError("dataset is empty")
        if len(self.images) != len(self.cameras):
            raise DatasetError(f"{len(self.images)} images for {len(self.cameras)} cameras")
        if len(set(self.view_ids)) != len(self.view_ids):
            raise DatasetError("view ids are not unique")
        if self.reference_view not in self.view_ids:
            raise DatasetError(f"reference view {self.reference_view} is not in the dataset")
        for vid, cam, img in zip(self.view_ids, self.cameras, self.images):
            if np.shape(img)[:2] != (cam.height, cam.width):
                raise DatasetError(f"view {vid}: image is {np.shape(img)[:2]}, camera expects {cam.shape}")
        if self.depths is not None:
            for vid, cam, d in zip(self.view_ids, self.cameras, self.depths):
                if d is not None and np.shape(d) != (cam.height, cam.width):
                    raise DatasetError(f"view {vid}: depth map shape {np.shape(d)} does not match camera")

    def copy(self) -> "ViewDataset":
        return ViewDataset(
            list(self.cameras),
            [np.array(i, copy=True) for i in self.images],
            None if self.depths is None else [None if d is None else np.array(d, copy=True) for d in self.depths],
            self.reference_view,
            list(self.view_ids),
        )


@dataclass
class DatasetManifest:
    root: Path
    camera_file: Path
    images: dict
    depths: dict
    reference_view: int
    mesh_file: Path | None = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def scan(cls, root) -> "DatasetManifest":
        root = Path(root)
        cam_file = root / "cameras.json"
        meta_file = root / "meta.json"
        if not cam_file.exists():
            raise DatasetError(f"{root}: missing cameras.json")
        meta = json.loads(meta_file.read_text()) if meta_file.exists() else {}
        n = len(json.loads(cam_file.read_text()))
        ids = [int(v) for v in meta.get("views", range(n))]
        if len(ids) != n:
            raise DatasetError(f"{root}: meta.json lists {len(ids)} views, cameras.json has {n}")
        if len(set(ids)) != len(ids):
            raise DatasetError(f"{root}: duplicate view ids")
        images, depths = {}, {}
        for vid in ids:
            p = root / "images" / f"{vid:03d}.png"
            if not p.exists():
                raise DatasetError(f"{root}: missing image for view {vid} ({p.name})")
            images[vid] = p
            d = root / "depth" / f"{vid:03d}.pfm"
            if d.exists():
                depths[vid] = d
        ref = int(meta.get("reference_view", ids[0]))
        if ref not in ids:
            raise DatasetError(f"{root}: reference view {ref} not among views {ids}")
        mesh = root / "mesh.obj"
        return cls(root, cam_file, images, depths, ref, mesh if mesh.exists() else None, meta)

    def load(self) -> ViewDataset:
        cams = load_cameras(self.camera_file)
        ids = list(self.images)
        images = [read_png(self.images[v]) for v in ids]
        depths = None
        if self.depths:
            depths = [read_pfm(self.depths[v]) if v in self.depths else None for v in ids]
        ds = ViewDataset(cams, images, depths, self.reference_view, ids)
        ds.validate()
        return ds


def load_dataset(root) -> ViewDataset:
    return DatasetManifest.scan(root).load()


def save_dataset(root, ds: ViewDataset, meta: dict | None = None) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    save_cameras(root / "cameras.json", ds.cameras)
    for vid, img in zip(ds.view_ids, ds.images):
        write_png(root / "images" / f"{vid:03d}.png", img)
    if ds.depths is not None:
        (root / "depth").mkdir(exist_ok=True)
        for vid, d in zip(ds.view_ids, ds.depths):
            if d is not None:
                write_pfm(root / "depth" / f"{vid:03d}.pfm", d)
    info = {"views": ds.view_ids, "reference_view": ds.reference_view}
    info.update(meta or {})
    (root / "meta.json").write_text(json.dumps(info, indent=1, sort_keys=True))
    return root


def check_image(image, shape=None, name: str = "image") -> np.ndarray:
    """Validate an (H, W, 3) float image and return it as float64."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"{name} must be (H, W, 3), got {arr.shape}")
    if shape is not None and arr.shape[:2] != tuple(shape):
        raise ValueError(f"{name} has size {arr.shape[:2]}, expected {tuple(shape)}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_camera(cam) -> Camera:
    if not isinstance(cam, Camera):
        raise TypeError(f"expected Camera, got {type(cam).__name__}")
    return cam
