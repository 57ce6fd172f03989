"""On-disk formats: checkpoints, datasets, reports and preview images.

Array containers are plain ``.npz`` zips written with fixed member
timestamps and sorted keys, so identical content always produces identical
bytes. JSON is written with sorted keys and a trailing newline.
"""

from __future__ import annotations

import csv
import io
import json
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .fit import LOSS_NAMES, DeformationCoefficients, FitReport, ObjectCoefficients, TrainingObject, TriMask
from .geometry import Box3D, ObjectSize
from .grid import DeformableShapeModel, GridLayout, MlpDecoder
from .pnp import Correspondences
from .synth import SCHEMA_VERSION, GeneratedObject, SceneSpec

CHECKPOINT_VERSION = 1
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)

try:
    from PIL import Image
except ImportError:  # PNG previews are optional
    Image = None


class StoreError(ValueError):
    pass


# --------------------------------------------------------------------------
# primitives


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise StoreError(f"{path}: no such file") from None
    except json.JSONDecodeError as e:
        raise StoreError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from None


def save_arrays(path, arrays: Dict[str, np.ndarray]) -> None:
    """Deterministic ``.npz``: sorted members, fixed timestamps, no compression."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for key in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[key]), allow_pickle=False)
            info = zipfile.ZipInfo(key + ".npy", date_time=_ZIP_EPOCH)
            info.external_attr = 0o644 << 16
            zf.writestr(info, buf.getvalue())


def load_arrays(path) -> Dict[str, np.ndarray]:
    try:
        with np.load(path, allow_pickle=False) as data:
            return {k: data[k] for k in data.files}
    except FileNotFoundError:
        raise StoreError(f"{path}: no such file") from None
    except (zipfile.BadZipFile, ValueError, OSError) as e:
        raise StoreError(f"{path}: not a valid array container ({e})") from None


def _text_array(obj) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode(), dtype=np.uint8)


def _array_text(arr: np.ndarray):
    return json.loads(arr.tobytes().decode())


# --------------------------------------------------------------------------
# checkpoints


def _model_arrays(prefix: str, model: DeformableShapeModel) -> Dict[str, np.ndarray]:
    out = {f"{prefix}/canonical": model.canonical, f"{prefix}/bases": model.bases}
    for i, (w, b) in enumerate(zip(model.decoder.weights, model.decoder.biases)):
        out[f"{prefix}/weight{i}"] = w
        out[f"{prefix}/bias{i}"] = b
    return out


def _model_from(prefix: str, arrays, layout: GridLayout, layers: int) -> DeformableShapeModel:
    decoder = MlpDecoder([arrays[f"{prefix}/weight{i}"] for i in range(layers)],
                         [arrays[f"{prefix}/bias{i}"] for i in range(layers)])
    return DeformableShapeModel(layout, arrays[f"{prefix}/canonical"], arrays[f"{prefix}/bases"], decoder)


def save_checkpoint(path, shape: DeformableShapeModel, color: DeformableShapeModel,
                    coefficients: Optional[Sequence[ObjectCoefficients]] = None, meta: Optional[dict] = None) -> None:
    header = {
        "checkpoint_version": CHECKPOINT_VERSION,
        "shape": {**shape.layout.to_dict(), "num_bases": shape.num_bases, "layers": len(shape.decoder.weights)},
        "color": {**color.layout.to_dict(), "num_bases": color.num_bases, "layers": len(color.decoder.weights)},
        "objects": len(coefficients or ()),
        "meta": meta or {},
    }
    arrays = {"header": _text_array(header)}
    arrays.update(_model_arrays("shape", shape))
    arrays.update(_model_arrays("color", color))
    for i, c in enumerate(coefficients or ()):
        arrays[f"coeff{i:03d}/shape_mean"] = c.shape.mean
        arrays[f"coeff{i:03d}/shape_log_variance"] = c.shape.log_variance
        arrays[f"coeff{i:03d}/color_mean"] = c.color.mean
        arrays[f"coeff{i:03d}/color_log_variance"] = c.color.log_variance
    save_arrays(path, arrays)


@dataclass
class Checkpoint:
    shape: DeformableShapeModel
    color: DeformableShapeModel
    coefficients: List[ObjectCoefficients]
    meta: dict


def load_checkpoint(path) -> Checkpoint:
    arrays = load_arrays(path)
    try:
        header = _array_text(arrays["header"])
        if header.get("checkpoint_version") != CHECKPOINT_VERSION:
            raise StoreError(f"{path}: unsupported checkpoint version {header.get('checkpoint_version')}")
        models = []
        for prefix in ("shape", "color"):
            h = header[prefix]
            layout = GridLayout(tuple(h["resolutions"]), int(h["feature_dim"]))
            models.append(_model_from(prefix, arrays, layout, int(h["layers"])))
        coeffs = []
        for i in range(int(header["objects"])):
            k = f"coeff{i:03d}"
            coeffs.append(ObjectCoefficients(
                DeformationCoefficients(arrays[f"{k}/shape_mean"], arrays[f"{k}/shape_log_variance"]),
                DeformationCoefficients(arrays[f"{k}/color_mean"], arrays[f"{k}/color_log_variance"]),
            ))
    except StoreError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise StoreError(f"{path}: malformed checkpoint ({e})") from None
    return Checkpoint(models[0], models[1], coeffs, header.get("meta", {}))


# --------------------------------------------------------------------------
# images


def to_uint8(x) -> np.ndarray:
    return np.round(np.clip(np.asarray(x, dtype=float), 0.0, 1.0) * 255.0).astype(np.uint8)


def nocs_image(nocs) -> np.ndarray:
    """NOCS in ``[-0.5, 0.5]`` mapped to 8-bit RGB; invalid pixels are black."""
    o = np.asarray(nocs, dtype=float)
    return to_uint8(np.where(np.isfinite(o), o + 0.5, 0.0))


def write_ppm(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.uint8)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(np.ascontiguousarray(img[..., :3]).tobytes())


def write_image(stem, img: np.ndarray) -> List[str]:
    """PPM always, PNG as well when Pillow is importable. Returns the written paths."""
    stem = str(stem)
    write_ppm(stem + ".ppm", img)
    written = [stem + ".ppm"]
    if Image is not None:
        Image.fromarray(np.asarray(img, dtype=np.uint8)).save(stem + ".png", optimize=False)
        written.append(stem + ".png")
    return written


def label_image(labels) -> np.ndarray:
    """Background black, foreground white, unknown gray."""
    lut = np.array([0, 255, 128], dtype=np.uint8)
    return lut[np.asarray(labels)]


# --------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    spec: SceneSpec
    objects: List[GeneratedObject]


def _corr_arrays(prefix, c: Correspondences):
    return {f"{prefix}_p": c.p, f"{prefix}_o": c.o, f"{prefix}_w": c.w}


def write_dataset(out_dir, spec: SceneSpec, objects: Sequence[GeneratedObject]) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "scene.json", {**spec.to_dict(), "generated": [g.index for g in objects]})
    for g in objects:
        d = out / f"object_{g.index:03d}"
        d.mkdir(exist_ok=True)
        t = g.training
        arrays = {
            "colors": t.colors,
            "labels": t.mask.labels,
            "gt_occupancy": g.gt_occupancy,
            "gt_nocs": g.gt_nocs,
            "silhouette": g.silhouette,
            "outliers": g.outliers,
            "correspondence_pixels": g.correspondence_pixels,
        }
        arrays.update(_corr_arrays("clean", g.clean))
        arrays.update(_corr_arrays("noisy", g.noisy))
        if t.lidar_nocs is not None:
            arrays["lidar_pixels"] = t.lidar_pixels
            arrays["lidar_nocs"] = t.lidar_nocs
        save_arrays(d / "arrays.npz", arrays)
        write_json(d / "meta.json", {
            "schema_version": SCHEMA_VERSION,
            "seed": spec.seed,
            "index": g.index,
            "box": t.box.to_dict(),
            "crop_offset": list(t.crop_offset),
            "d_pred": g.d_pred,
            "size_pred": g.size_pred.as_array().tolist(),
            "box_height_px": g.box_height_px,
            "basis_eligible": t.basis_eligible,
        })
        write_image(d / "preview_color", to_uint8(t.colors))
        write_image(d / "preview_mask", label_image(t.mask.labels))
        write_image(d / "preview_nocs", nocs_image(g.gt_nocs))


def _corr_from(prefix, a) -> Correspondences:
    return Correspondences(a[f"{prefix}_p"], a[f"{prefix}_o"], a[f"{prefix}_w"])


def read_dataset(path) -> Dataset:
    root = Path(path)
    if not (root / "scene.json").is_file():
        raise StoreError(f"{root}: not a dataset directory (missing scene.json)")
    raw = read_json(root / "scene.json")
    spec = SceneSpec.from_dict({k: v for k, v in raw.items() if k != "generated"})
    objects = []
    for index in raw.get("generated", range(len(spec.objects))):
        d = root / f"object_{index:03d}"
        meta = read_json(d / "meta.json")
        a = load_arrays(d / "arrays.npz")
        try:
            training = TrainingObject(
                colors=a["colors"], mask=TriMask(a["labels"]), box=Box3D.from_dict(meta["box"]), camera=spec.camera,
                crop_offset=tuple(int(v) for v in meta["crop_offset"]),
                lidar_pixels=a.get("lidar_pixels"), lidar_nocs=a.get("lidar_nocs"),
                basis_eligible=bool(meta["basis_eligible"]),
            )
            objects.append(GeneratedObject(
                int(meta["index"]), training, a["gt_occupancy"], a["gt_nocs"], a["silhouette"],
                _corr_from("clean", a), _corr_from("noisy", a), a["outliers"], a["correspondence_pixels"],
                float(meta["d_pred"]), ObjectSize.from_array(meta["size_pred"]), float(meta["box_height_px"]),
            ))
        except (KeyError, TypeError, ValueError) as e:
            raise StoreError(f"{d}: malformed object record ({e})") from None
    return Dataset(spec, objects)


# --------------------------------------------------------------------------
# reports


def write_fit_report(path, report: FitReport) -> None:
    """One row per iteration; wall clock is left out so reruns match byte for byte."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(("iteration",) + LOSS_NAMES + ("total",))
        for row in report.rows:
            writer.writerow([row["iteration"]] + [repr(float(row[k])) for k in LOSS_NAMES + ("total",)])


def read_fit_report(path) -> List[Dict[str, float]]:
    with open(path, newline="") as f:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(f)]


def write_csv(path, fields: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(fields), lineterminator="\n", extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p

