"""File formats: frames, labels, segmentation maps, models, manifests, logs.

Dependency-free binary formats:

* Frames: binary PPM (P6, maxval 255), 8-bit RGB.
* Label maps: binary PGM (P5, maxval 255); value 255 means "ignore".
* Segmentation probabilities: magic ``VSEG``, little-endian uint32 version,
  then C, H, W as little-endian uint32, then C*H*W float32 values in
  row-major CHW order.
* Model store: a directory with ``manifest.json`` (format version, module
  list, tensor names/shapes in order, the shift-bank offset ordering the
  fusion relies on, optional training state) plus ``weights.bin``, the
  little-endian float32 tensors concatenated in manifest order.

All writes are atomic (write to a temp file in the target directory, then
rename). Loaders reject unknown format versions by name.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import PipelineConfig
from .errors import MissingFileError, ShapeError, StorageError
from .flow import FlowNetParams
from .fusion import GuideNetParams
from .intra import IntraNetParams
from .pipeline import Models, ToySegParams
from .shifts import KernelBank
from .tensor import ConvSpec, Tensor
from .warp import PROBS, SegTensor

SEG_MAGIC = b"VSEG"
SEG_VERSION = 1
STORE_VERSION = 1
MANIFEST_NAME = "manifest.json"
WEIGHTS_NAME = "weights.bin"


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# netpbm images


def _read_pnm_header(data: bytes, magic: bytes, path) -> tuple[int, int, int, int]:
    if not data.startswith(magic):
        raise StorageError(f"{path}: expected {magic.decode()} header")
    fields = []
    pos = len(magic)
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    width, height, maxval = fields
    if maxval != 255:
        raise StorageError(f"{path}: only maxval 255 supported, got {maxval}")
    return width, height, maxval, pos


def write_ppm(path, frame: Tensor) -> None:
    """Frame values in [0, 1] quantized to 8-bit RGB."""
    if frame.channels != 3:
        raise ShapeError(f"PPM frames need 3 channels, got {frame.shape}")
    u8 = np.clip(np.rint(frame.data * 255.0), 0, 255).astype(np.uint8)
    header = f"P6\n{frame.width} {frame.height}\n255\n".encode()
    atomic_write_bytes(Path(path), header + u8.transpose(1, 2, 0).tobytes())


def read_ppm(path, dtype=np.float64) -> Tensor:
    path = Path(path)
    data = path.read_bytes()
    width, height, _, pos = _read_pnm_header(data, b"P6", path)
    body = data[pos:pos + height * width * 3]
    if len(body) != height * width * 3:
        raise StorageError(f"{path}: truncated pixel data")
    arr = np.frombuffer(body, dtype=np.uint8).reshape(height, width, 3)
    return Tensor.wrap(arr.transpose(2, 0, 1).astype(dtype) / 255.0)


def write_pgm(path, labels: np.ndarray) -> None:
    if labels.min() < 0 or labels.max() > 255:
        raise ShapeError(f"labels outside [0, 255]: {labels.min()}..{labels.max()}")
    u8 = labels.astype(np.uint8)
    header = f"P5\n{labels.shape[1]} {labels.shape[0]}\n255\n".encode()
    atomic_write_bytes(Path(path), header + u8.tobytes())


def read_pgm(path) -> np.ndarray:
    path = Path(path)
    data = path.read_bytes()
    width, height, _, pos = _read_pnm_header(data, b"P5", path)
    body = data[pos:pos + height * width]
    if len(body) != height * width:
        raise StorageError(f"{path}: truncated pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width).astype(np.int64)


# ---------------------------------------------------------------------------
# segmentation probability maps


def write_seg(path, seg: SegTensor) -> None:
    if not seg.is_probs:
        raise ShapeError("segmentation files hold probabilities")
    c, h, w = seg.scores.shape
    header = SEG_MAGIC + struct.pack("<IIII", SEG_VERSION, c, h, w)
    atomic_write_bytes(Path(path), header + seg.data.astype("<f4").tobytes())


def read_seg(path, dtype=np.float64) -> SegTensor:
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != SEG_MAGIC:
        raise StorageError(f"{path}: bad magic {data[:4]!r}, expected {SEG_MAGIC!r}")
    version, c, h, w = struct.unpack("<IIII", data[4:20])
    if version != SEG_VERSION:
        raise StorageError(f"{path}: unsupported version {version} (expected {SEG_VERSION})")
    body = data[20:]
    if len(body) != 4 * c * h * w:
        raise StorageError(f"{path}: payload is {len(body)} bytes, expected {4 * c * h * w}")
    arr = np.frombuffer(body, dtype="<f4").reshape(c, h, w).astype(dtype)
    return SegTensor(Tensor.wrap(arr), semantics=PROBS)


# ---------------------------------------------------------------------------
# model store


def _named_tensors(models: Models, toy: ToySegParams | None) -> list[tuple[str, np.ndarray]]:
    out = [(p.name, p.array) for p in models.parameters()]
    if not models.bank.learnable:
        out.append(("bank.kernels", models.bank.kernels))
    if toy is not None:
        for i, spec in enumerate(toy.layers):
            out.append((f"toy.{i}.weight", spec.kernel))
            out.append((f"toy.{i}.bias", spec.bias))
    return out


def save_models(path, models: Models, config: PipelineConfig,
                toy: ToySegParams | None = None,
                training: dict | None = None,
                velocities: dict[str, np.ndarray] | None = None) -> None:
    """Write manifest.json + weights.bin into the directory `path`."""
    path = Path(path)
    tensors = _named_tensors(models, toy)
    if velocities:
        tensors += [(f"opt.{name}", arr) for name, arr in sorted(velocities.items())]
    manifest = {
        "format_version": STORE_VERSION,
        "modules": sorted({name.split(".")[0] for name, _ in tensors}),
        "class_count": config.class_count,
        "kernel_bank": {
            "size": models.bank.size,
            "offsets": [list(o) for o in models.bank.offsets],
            "learnable": models.bank.learnable,
            "candidate_order": "bank offsets in listed order, intra prediction last",
        },
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in tensors],
    }
    if training is not None:
        manifest["training"] = training
    blob = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for _, a in tensors)
    path.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(path / MANIFEST_NAME, json.dumps(manifest, indent=2).encode())
    atomic_write_bytes(path / WEIGHTS_NAME, blob)


def _manifest_diff(entries: list[dict], blob_len: int) -> str:
    expected = sum(int(np.prod(e["shape"])) for e in entries) * 4
    lines = [f"manifest expects {expected} bytes, weights.bin holds {blob_len}"]
    for e in entries:
        lines.append(f"  {e['name']}: shape {tuple(e['shape'])}")
    return "\n".join(lines)


@dataclass
class LoadedStore:
    models: Models
    toy: ToySegParams | None
    training: dict | None
    velocities: dict[str, np.ndarray]
    manifest: dict


def load_models(path, dtype=np.float64) -> LoadedStore:
    path = Path(path)
    manifest_path = path / MANIFEST_NAME
    if not manifest_path.exists():
        raise MissingFileError(f"{manifest_path}: no such file")
    manifest = json.loads(manifest_path.read_text())
    version = manifest.get("format_version")
    if version != STORE_VERSION:
        raise StorageError(
            f"{manifest_path}: unsupported format version {version!r} "
            f"(expected {STORE_VERSION})")
    blob = (path / WEIGHTS_NAME).read_bytes()
    entries = manifest["tensors"]
    expected = sum(int(np.prod(e["shape"])) for e in entries) * 4
    if expected != len(blob):
        raise StorageError(
            f"{path}: corrupt checkpoint\n{_manifest_diff(entries, len(blob))}")
    tensors: dict[str, np.ndarray] = {}
    offset = 0
    for e in entries:
        shape = tuple(int(s) for s in e["shape"])
        n = int(np.prod(shape)) * 4
        arr = np.frombuffer(blob[offset:offset + n], dtype="<f4").reshape(shape)
        tensors[e["name"]] = arr.astype(dtype)
        offset += n

    def conv(prefix: str, stride=1, dilation=1, padding: int | None = None) -> ConvSpec:
        kernel = tensors[f"{prefix}.weight"]
        bias = tensors[f"{prefix}.bias"]
        k = kernel.shape[2]
        pad = dilation * (k - 1) // 2 if padding is None else padding
        return ConvSpec(kernel=kernel, bias=bias, stride=stride, dilation=dilation,
                        padding=pad)

    bank_info = manifest["kernel_bank"]
    bank = KernelBank(size=int(bank_info["size"]),
                      offsets=tuple((int(a), int(b)) for a, b in bank_info["offsets"]),
                      kernels=tensors["bank.kernels"],
                      learnable=bool(bank_info["learnable"]))
    models = Models(
        flow=FlowNetParams(
            stem=(conv("flow.stem0", stride=2), conv("flow.stem1", stride=2)),
            dilated=tuple(conv(f"flow.dilated{i}", dilation=d)
                          for i, d in enumerate((1, 2, 4, 8))),
            head=conv("flow.head")),
        intra=IntraNetParams(layers=tuple(conv(f"intra.{i}") for i in range(3))),
        guide=GuideNetParams(layers=tuple(conv(f"guide.{i}") for i in range(3)),
                             edge_scale=tensors["guide.edge_scale"]),
        bank=bank)
    toy = None
    if "toy.0.weight" in tensors:
        toy = ToySegParams(layers=(
            conv("toy.0", stride=2), conv("toy.1", stride=2),
            conv("toy.2", stride=2), conv("toy.3")))
    velocities = {name[len("opt."):]: arr for name, arr in tensors.items()
                  if name.startswith("opt.")}
    return LoadedStore(models=models, toy=toy, training=manifest.get("training"),
                       velocities=velocities, manifest=manifest)


# ---------------------------------------------------------------------------
# sequence manifests and datasets


@dataclass
class SeqManifest:
    """One video snippet: ordered frame files plus optional oracle/label files."""

    root: Path
    class_count: int
    frame_height: int
    frame_width: int
    frames: list[str]
    oracle_segs: list[str] | None = None
    labels: list[str] | None = None

    def __len__(self) -> int:
        return len(self.frames)

    def frame_path(self, i: int) -> Path:
        return self.root / self.frames[i]

    def oracle_path(self, i: int) -> Path:
        return self.root / self.oracle_segs[i]

    def label_path(self, i: int) -> Path:
        return self.root / self.labels[i]


def save_seq_manifest(path, manifest: SeqManifest) -> None:
    data = {
        "version": 1,
        "class_count": manifest.class_count,
        "frame_size": [manifest.frame_height, manifest.frame_width],
        "frames": manifest.frames,
        "oracle_segs": manifest.oracle_segs,
        "labels": manifest.labels,
    }
    atomic_write_bytes(Path(path), json.dumps(data, indent=2).encode())


def load_seq_manifest(path) -> SeqManifest:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"{path}: no such file")
    data = json.loads(path.read_text())
    if data.get("version") != 1:
        raise StorageError(f"{path}: unsupported manifest version {data.get('version')!r}")
    manifest = SeqManifest(
        root=path.parent,
        class_count=int(data["class_count"]),
        frame_height=int(data["frame_size"][0]),
        frame_width=int(data["frame_size"][1]),
        frames=list(data["frames"]),
        oracle_segs=data.get("oracle_segs"),
        labels=data.get("labels"))
    for i in range(len(manifest)):
        if not manifest.frame_path(i).exists():
            raise MissingFileError(f"missing frame file: {manifest.frame_path(i)}")
        if manifest.oracle_segs and not manifest.oracle_path(i).exists():
            raise MissingFileError(f"missing oracle file: {manifest.oracle_path(i)}")
        if manifest.labels and not manifest.label_path(i).exists():
            raise MissingFileError(f"missing label file: {manifest.label_path(i)}")
    return manifest


def save_dataset_index(path, manifest_paths: Sequence[str]) -> None:
    atomic_write_bytes(Path(path), json.dumps(
        {"version": 1, "snippets": list(manifest_paths)}, indent=2).encode())


def load_dataset_index(path) -> list[Path]:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"{path}: no such file")
    data = json.loads(path.read_text())
    if data.get("version") != 1:
        raise StorageError(f"{path}: unsupported index version {data.get('version')!r}")
    return [path.parent / p for p in data["snippets"]]


# ---------------------------------------------------------------------------
# logs


def write_timing_log(path, times) -> None:
    lines = ["idx,kind,flow_us,warp_us,feat_us,fuse_us,total_us"]
    for t in times:
        lines.append(f"{t.index},{t.kind},{t.flow_us},{t.warp_us},"
                     f"{t.feat_us},{t.fuse_us},{t.total_us}")
    atomic_write_bytes(Path(path), ("\n".join(lines) + "\n").encode())


def write_loss_curve(path, curve) -> None:
    lines = ["iter,lr,loss"]
    for it, lr, loss in curve:
        lines.append(f"{it},{lr!r},{loss!r}")
    atomic_write_bytes(Path(path), ("\n".join(lines) + "\n").encode())


def read_loss_curve(path) -> list[tuple[int, float, float]]:
    lines = Path(path).read_text().strip().splitlines()
    if not lines or lines[0] != "iter,lr,loss":
        raise StorageError(f"{path}: not a loss-curve file")
    out = []
    for line in lines[1:]:
        it, lr, loss = line.split(",")
        out.append((int(it), float(lr), float(loss)))
    return out
