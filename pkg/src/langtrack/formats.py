"""On-disk formats: frames, corpora, label files, metrics, checkpoints,
trace records, and evaluation reports.

Everything is little-endian and byte-deterministic; files are written to a
temp path and renamed into place.  Frame files are uncompressed planar
images (magic ``IMG0``), checkpoints are length-prefixed named tensors
(magic ``SVLT``).
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .config import RunConfig, config_to_text, parse_config_text
from .errors import DataError
from .heads_losses import Box
from .synth import VideoClip

FRAME_MAGIC = b"IMG0"
CHECKPOINT_MAGIC = b"SVLT"
CHECKPOINT_VERSION = 1

_DTYPE_CODES = {np.dtype(np.float32): 4, np.dtype(np.float64): 8}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def atomic_write(path, data):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def fmt_float(v):
    """Shortest round-trip decimal form; deterministic across runs."""
    return repr(float(v))


# ---------------------------------------------------------------------------
# frames


def frame_to_bytes(frame):
    if frame.dtype != np.uint8 or frame.ndim != 3:
        raise DataError(f"frame must be uint8 HxWxC, got {frame.dtype} {frame.shape}")
    h, w, c = frame.shape
    header = FRAME_MAGIC + struct.pack("<III", w, h, c)
    planes = b"".join(np.ascontiguousarray(frame[:, :, i]).tobytes() for i in range(c))
    return header + planes


def frame_from_bytes(blob, path="<memory>"):
    if blob[:4] != FRAME_MAGIC:
        raise DataError(f"{path}: bad frame magic {blob[:4]!r}")
    w, h, c = struct.unpack("<III", blob[4:16])
    expected = 16 + w * h * c
    if len(blob) != expected:
        raise DataError(f"{path}: frame payload {len(blob)} bytes, expected {expected}")
    planes = np.frombuffer(blob[16:], dtype=np.uint8).reshape(c, h, w)
    return np.ascontiguousarray(planes.transpose(1, 2, 0))


def write_frame(path, frame):
    atomic_write(path, frame_to_bytes(frame))


def read_frame(path):
    try:
        with open(path, "rb") as fh:
            return frame_from_bytes(fh.read(), path=str(path))
    except OSError as exc:
        raise DataError(f"cannot read frame {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# corpus: clip directories + tab-separated manifest


def write_corpus(clips, out_dir):
    """Write clip directories and the manifest; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    lines = []
    for clip in clips:
        rel = os.path.join("clips", clip.clip_id)
        clip_dir = os.path.join(out_dir, rel)
        os.makedirs(clip_dir, exist_ok=True)
        for t, frame in enumerate(clip.frames):
            write_frame(os.path.join(clip_dir, f"frame_{t:03d}.img0"), frame)
        gt_lines = [
            f"{t}\t{fmt_float(b.cx)}\t{fmt_float(b.cy)}\t{fmt_float(b.w)}\t{fmt_float(b.h)}"
            for t, b in enumerate(clip.gt_boxes)
        ]
        atomic_write(os.path.join(clip_dir, "gt.tsv"), ("\n".join(gt_lines) + "\n").encode())
        lines.append(f"{clip.clip_id}\t{rel}\t{clip.query}\t{clip.split}")
    manifest = os.path.join(out_dir, "manifest.tsv")
    atomic_write(manifest, ("\n".join(lines) + "\n").encode())
    return manifest


def read_manifest(manifest_path):
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read manifest {manifest_path}: {exc}") from exc
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise DataError(f"{manifest_path}:{lineno}: expected 4 tab-separated fields")
        records.append({"clip_id": parts[0], "path": parts[1], "query": parts[2], "split": parts[3]})
    return records


def load_clip(corpus_dir, record):
    clip_dir = os.path.join(corpus_dir, record["path"])
    names = sorted(n for n in os.listdir(clip_dir) if n.endswith(".img0"))
    if not names:
        raise DataError(f"clip {record['clip_id']}: no frames under {clip_dir}")
    frames = np.stack([read_frame(os.path.join(clip_dir, n)) for n in names])
    boxes = []
    gt_path = os.path.join(clip_dir, "gt.tsv")
    with open(gt_path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 5:
                raise DataError(f"{gt_path}:{lineno}: expected 5 fields")
            boxes.append(Box(*(float(v) for v in parts[1:])))
    return VideoClip(frames, boxes, record["query"], clip_id=record["clip_id"], split=record["split"])


def load_corpus(corpus_dir, split=None):
    records = read_manifest(os.path.join(corpus_dir, "manifest.tsv"))
    if split is not None:
        records = [r for r in records if r["split"] == split]
    return [load_clip(corpus_dir, r) for r in records]


# ---------------------------------------------------------------------------
# pseudo-label files: "clip_id cx cy w h", '#' comments


def parse_label_file(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read label file {path}: {exc}") from exc
    table = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        parts = stripped.split()
        if len(parts) != 5:
            raise DataError(f"{path}:{lineno}: expected 'clip_id cx cy w h'")
        try:
            table[parts[0]] = Box(*(float(v) for v in parts[1:]))
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: bad number ({exc})") from None
    return table


# ---------------------------------------------------------------------------
# metrics stream: one "key=value ..." record per line


def metrics_line(fields):
    parts = []
    for key, value in fields.items():
        if isinstance(value, float):
            parts.append(f"{key}={fmt_float(value)}")
        else:
            parts.append(f"{key}={value}")
    return " ".join(parts)


def parse_metrics_line(line):
    out = {}
    for chunk in line.split():
        key, _, raw = chunk.partition("=")
        try:
            out[key] = int(raw)
        except ValueError:
            try:
                out[key] = float(raw)
            except ValueError:
                out[key] = raw
    return out


class MetricsWriter:
    """Append-only metrics stream."""

    def __init__(self, path):
        self.path = path
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        self._fh = open(path, "a", encoding="utf-8")

    def write(self, fields):
        self._fh.write(metrics_line(fields) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()


# ---------------------------------------------------------------------------
# checkpoints


def _pack_array(name, arr):
    nb = name.encode("utf-8")
    out = [struct.pack("<H", len(nb)), nb]
    out.append(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
    out.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
    payload = np.ascontiguousarray(arr).tobytes()
    out.append(struct.pack("<Q", len(payload)))
    out.append(payload)
    return b"".join(out)


class _Reader:
    def __init__(self, blob, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise DataError(f"{self.path}: truncated checkpoint")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_array(r):
    (name_len,) = r.unpack("<H")
    name = r.take(name_len).decode("utf-8")
    code, ndim = r.unpack("<BB")
    if code not in _CODE_DTYPES:
        raise DataError(f"{r.path}: unknown dtype code {code}")
    shape = r.unpack(f"<{ndim}I") if ndim else ()
    (nbytes,) = r.unpack("<Q")
    arr = np.frombuffer(r.take(nbytes), dtype=_CODE_DTYPES[code]).reshape(shape).copy()
    return name, arr


def save_checkpoint(path, cfg, params, epoch, rng_state=None, optimizer_state=None):
    """cfg: RunConfig; params: name -> Tensor; optimizer_state from AdamW."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    cfg_text = config_to_text(cfg).encode("utf-8")
    chunks.append(struct.pack("<I", len(cfg_text)))
    chunks.append(cfg_text)
    chunks.append(struct.pack("<I", int(epoch)))
    rng_text = json.dumps(rng_state, sort_keys=True).encode("utf-8") if rng_state else b""
    chunks.append(struct.pack("<I", len(rng_text)))
    chunks.append(rng_text)
    chunks.append(struct.pack("<I", len(params)))
    for name, p in params.items():
        chunks.append(_pack_array(name, p.data))
    if optimizer_state is None:
        chunks.append(struct.pack("<B", 0))
    else:
        chunks.append(struct.pack("<B", 1))
        chunks.append(struct.pack("<Q", optimizer_state["step"]))
        for name in params:
            chunks.append(_pack_array(name, optimizer_state["m"][name]))
        for name in params:
            chunks.append(_pack_array(name, optimizer_state["v"][name]))
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    atomic_write(path, b"".join(chunks))


@dataclass
class Checkpoint:
    cfg: RunConfig
    epoch: int
    rng_state: dict | None
    params: dict
    optimizer_state: dict | None


def load_checkpoint(path):
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    r = _Reader(blob, path)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise DataError(
            f"{path}: checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})"
        )
    (cfg_len,) = r.unpack("<I")
    cfg = parse_config_text(r.take(cfg_len).decode("utf-8"))
    (epoch,) = r.unpack("<I")
    (rng_len,) = r.unpack("<I")
    rng_state = json.loads(r.take(rng_len).decode("utf-8")) if rng_len else None
    (count,) = r.unpack("<I")
    params = dict(_read_array(r) for _ in range(count))
    (has_opt,) = r.unpack("<B")
    optimizer_state = None
    if has_opt:
        (step,) = r.unpack("<Q")
        m = dict(_read_array(r) for _ in range(count))
        v = dict(_read_array(r) for _ in range(count))
        optimizer_state = {"step": step, "m": m, "v": v}
    return Checkpoint(cfg, epoch, rng_state, params, optimizer_state)


def restore_model(model, checkpoint):
    """Copy checkpoint tensors into a model after an architecture echo check."""
    if checkpoint.cfg.model != model.cfg:
        raise DataError(
            "checkpoint architecture does not match the configured model:\n"
            f"  checkpoint: {checkpoint.cfg.model}\n  configured: {model.cfg}"
        )
    if set(checkpoint.params) != set(model.params):
        raise DataError("checkpoint parameter names do not match the model")
    for name, arr in checkpoint.params.items():
        if arr.shape != model.params[name].shape:
            raise DataError(f"checkpoint tensor {name} has shape {arr.shape}")
        model.params[name].data = arr.copy()


# ---------------------------------------------------------------------------
# trace records


def selection_trace_lines(frame_index, kind, origins, weights):
    return [
        f"frame={frame_index} kind={kind} row={int(r)} col={int(c)} weight={fmt_float(w)}"
        for (r, c), w in zip(origins, weights)
    ]


def box_trace_line(frame_index, box):
    return (
        f"frame={frame_index} kind=box cx={fmt_float(box.cx)} cy={fmt_float(box.cy)} "
        f"w={fmt_float(box.w)} h={fmt_float(box.h)}"
    )


# ---------------------------------------------------------------------------
# evaluation report files


def write_eval_report(out_dir, results, aggregate, curves):
    """Delimited report trio: per-clip summary, curve samples, per-frame rows."""
    os.makedirs(out_dir, exist_ok=True)
    rows = ["clip\tauc\tp20\tpnorm02\tmean_iou"]
    for res in results:
        rows.append(
            f"{res.clip_id}\t{fmt_float(res.auc)}\t{fmt_float(res.p20)}"
            f"\t{fmt_float(res.pnorm02)}\t{fmt_float(res.mean_iou)}"
        )
    rows.append(
        f"AGGREGATE\t{fmt_float(aggregate['auc'])}\t{fmt_float(aggregate['p20'])}"
        f"\t{fmt_float(aggregate['pnorm02'])}\t{fmt_float(aggregate['mean_iou'])}"
    )
    atomic_write(os.path.join(out_dir, "report.tsv"), ("\n".join(rows) + "\n").encode())

    curve_rows = []
    for name, thresholds, values in (
        ("success", curves.success_thresholds, curves.success),
        ("precision", curves.precision_thresholds, curves.precision),
        ("norm_precision", curves.norm_thresholds, curves.norm_precision),
    ):
        for t, v in zip(thresholds, values):
            curve_rows.append(f"{name}\t{fmt_float(t)}\t{fmt_float(v)}")
    atomic_write(os.path.join(out_dir, "curves.tsv"), ("\n".join(curve_rows) + "\n").encode())

    frame_rows = ["clip\tframe\tiou\tcenter_err_px\tnorm_center_err"]
    for res in results:
        for t in range(len(res.ious)):
            frame_rows.append(
                f"{res.clip_id}\t{t}\t{fmt_float(res.ious[t])}"
                f"\t{fmt_float(res.center_err_px[t])}\t{fmt_float(res.norm_center_err[t])}"
            )
    atomic_write(os.path.join(out_dir, "frames.tsv"), ("\n".join(frame_rows) + "\n").encode())
    return os.path.join(out_dir, "report.tsv")
