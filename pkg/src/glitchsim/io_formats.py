"""Persistent formats: LSNM model files, IDX datasets, synthetic data,
LSNF logit fixtures, campaign configuration, and result serialization.

All encodings are little-endian except IDX, which is big-endian per its
standard. LSNM layout: magic "LSNM", version u16, layer count u16, then per
layer a kind byte, a u32-count-prefixed list of u32 shape parameters
(starting with the layer's declared input shape), and a u64-length-prefixed
float32 weight blob (conv: weights then bias; dense: weights then bias;
other kinds: empty).
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import (
    AvgPool,
    Conv2D,
    Dense,
    Flatten,
    MaxPool,
    Model,
    ReLU,
    Softmax,
)

MAGIC = b"LSNM"
VERSION = 1
FIXTURE_MAGIC = b"LSNF"

_KIND_CODES = {
    "conv2d": 1,
    "dense": 2,
    "relu": 3,
    "maxpool": 4,
    "avgpool": 5,
    "flatten": 6,
    "softmax": 7,
}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class ModelFormatError(ValueError):
    """Malformed LSNM data; carries the byte offset of the defect."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class IdxFormatError(ValueError):
    pass


class ConfigError(ValueError):
    pass


def _layer_params(layer) -> list[int]:
    if layer.kind == "conv2d":
        c, h, w = layer.in_shape
        kh, kw = layer.kernel
        return [c, h, w, layer.out_channels, kh, kw, layer.stride, layer.padding]
    if layer.kind == "dense":
        return [layer.in_features, layer.out_features]
    if layer.kind in ("maxpool", "avgpool"):
        c, h, w = layer.in_shape
        return [c, h, w, layer.window, layer.stride]
    # relu / flatten / softmax: the declared input shape
    return [int(d) for d in layer.in_shape]


def _layer_blob(layer) -> bytes:
    if layer.kind == "conv2d":
        return (
            layer.weights.astype("<f4").tobytes()
            + layer.bias.astype("<f4").tobytes()
        )
    if layer.kind == "dense":
        return (
            layer.weights.astype("<f4").tobytes()
            + layer.bias.astype("<f4").tobytes()
        )
    return b""


def _build_layer(kind: str, params: list[int], blob: bytes, offset: int):
    f4 = np.dtype("<f4")
    if kind == "conv2d":
        if len(params) != 8:
            raise ModelFormatError("conv2d expects 8 shape parameters", offset)
        c, h, w, out_c, kh, kw, stride, padding = params
        n_w = out_c * c * kh * kw
        want = (n_w + out_c) * 4
        if len(blob) != want:
            raise ModelFormatError(
                f"conv2d weight blob has {len(blob)} bytes, expected {want}", offset
            )
        flat = np.frombuffer(blob, dtype=f4)
        return Conv2D(
            in_shape=(c, h, w),
            out_channels=out_c,
            kernel=(kh, kw),
            stride=stride,
            padding=padding,
            weights=flat[:n_w].reshape(out_c, c, kh, kw).copy(),
            bias=flat[n_w:].copy(),
        )
    if kind == "dense":
        if len(params) != 2:
            raise ModelFormatError("dense expects 2 shape parameters", offset)
        n_in, n_out = params
        want = (n_in * n_out + n_out) * 4
        if len(blob) != want:
            raise ModelFormatError(
                f"dense weight blob has {len(blob)} bytes, expected {want}", offset
            )
        flat = np.frombuffer(blob, dtype=f4)
        return Dense(
            in_features=n_in,
            out_features=n_out,
            weights=flat[: n_in * n_out].reshape(n_out, n_in).copy(),
            bias=flat[n_in * n_out :].copy(),
        )
    if blob:
        raise ModelFormatError(f"{kind} carries no weights but blob is non-empty", offset)
    if kind in ("maxpool", "avgpool"):
        if len(params) != 5:
            raise ModelFormatError(f"{kind} expects 5 shape parameters", offset)
        c, h, w, window, stride = params
        cls = MaxPool if kind == "maxpool" else AvgPool
        return cls(in_shape=(c, h, w), window=window, stride=stride)
    if kind == "relu":
        return ReLU(in_shape=tuple(params))
    if kind == "flatten":
        return Flatten(in_shape=tuple(params))
    if kind == "softmax":
        if len(params) != 1:
            raise ModelFormatError("softmax expects 1 shape parameter", offset)
        return Softmax(in_shape=(params[0],))
    raise ModelFormatError(f"unknown layer kind {kind!r}", offset)


def model_bytes(model: Model) -> bytes:
    out = bytearray()
    out += MAGIC
    out += struct.pack("<HH", VERSION, len(model.layers))
    for layer in model.layers:
        params = _layer_params(layer)
        blob = _layer_blob(layer)
        out += struct.pack("<B", _KIND_CODES[layer.kind])
        out += struct.pack("<I", len(params))
        out += struct.pack(f"<{len(params)}I", *params)
        out += struct.pack("<Q", len(blob))
        out += blob
    return bytes(out)


def save_model(model: Model, path) -> None:
    with open(path, "wb") as f:
        f.write(model_bytes(model))


def model_from_bytes(data: bytes) -> Model:
    if len(data) < 8:
        raise ModelFormatError("file shorter than the fixed header", 0)
    if data[:4] != MAGIC:
        raise ModelFormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}", 0)
    version, layer_count = struct.unpack_from("<HH", data, 4)
    if version != VERSION:
        raise ModelFormatError(f"unsupported version {version}", 4)
    pos = 8
    layers = []
    for i in range(layer_count):
        layer_start = pos
        if pos + 5 > len(data):
            raise ModelFormatError(f"truncated layer {i} header", pos)
        (code,) = struct.unpack_from("<B", data, pos)
        pos += 1
        if code not in _CODE_KINDS:
            raise ModelFormatError(f"unknown layer kind code {code}", pos - 1)
        (n_params,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if pos + 4 * n_params > len(data):
            raise ModelFormatError(f"truncated parameter list of layer {i}", pos)
        params = list(struct.unpack_from(f"<{n_params}I", data, pos))
        pos += 4 * n_params
        if pos + 8 > len(data):
            raise ModelFormatError(f"truncated blob length of layer {i}", pos)
        (blob_len,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        if pos + blob_len > len(data):
            raise ModelFormatError(
                f"truncated weight blob of layer {i}: need {blob_len} bytes, "
                f"have {len(data) - pos}",
                pos,
            )
        blob = data[pos : pos + blob_len]
        pos += blob_len
        layers.append(_build_layer(_CODE_KINDS[code], params, blob, layer_start))
    if pos != len(data):
        raise ModelFormatError(f"{len(data) - pos} trailing bytes after last layer", pos)
    if not layers:
        raise ModelFormatError("model has no layers", 8)
    try:
        return Model(input_shape=tuple(layers[0].in_shape), layers=tuple(layers))
    except engine.ShapeError as e:
        raise ModelFormatError(f"incompatible layer shapes: {e}", 8) from e


def load_model(path) -> Model:
    with open(path, "rb") as f:
        return model_from_bytes(f.read())


def model_digest(model: Model) -> str:
    return hashlib.sha256(model_bytes(model)).hexdigest()


# --- datasets ---------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray  # float32, (n, ...) item values
    labels: np.ndarray  # int64, (n,)

    def __post_init__(self):
        if self.x.shape[0] != self.labels.shape[0]:
            raise ValueError("item/label count mismatch")

    def __len__(self) -> int:
        return int(self.x.shape[0])


def load_idx(images_path, labels_path) -> Dataset:
    """Load an IDX image/label pair; pixels scaled to [0, 1] (divide by 255)."""
    with open(images_path, "rb") as f:
        head = f.read(16)
        if len(head) < 16:
            raise IdxFormatError("truncated IDX image header")
        magic, count, rows, cols = struct.unpack(">IIII", head)
        if magic != IDX_IMAGES_MAGIC:
            raise IdxFormatError(
                f"bad IDX image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"
            )
        raw = f.read(count * rows * cols)
    if len(raw) != count * rows * cols:
        raise IdxFormatError("truncated IDX image data")
    with open(labels_path, "rb") as f:
        head = f.read(8)
        if len(head) < 8:
            raise IdxFormatError("truncated IDX label header")
        magic, n_labels = struct.unpack(">II", head)
        if magic != IDX_LABELS_MAGIC:
            raise IdxFormatError(
                f"bad IDX label magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"
            )
        labels = np.frombuffer(f.read(n_labels), dtype=np.uint8)
    if len(labels) != n_labels:
        raise IdxFormatError("truncated IDX label data")
    if n_labels != count:
        raise IdxFormatError(f"{count} images but {n_labels} labels")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows, cols)
    x = images.astype(np.float32) / np.float32(255.0)
    return Dataset(x=x, labels=labels.astype(np.int64))


def save_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write an IDX image/label pair (images uint8, shape (n, rows, cols))."""
    if images.dtype != np.uint8 or images.ndim != 3:
        raise ValueError("images must be uint8 with shape (n, rows, cols)")
    n, rows, cols = images.shape
    if labels.shape != (n,):
        raise ValueError("labels must be one per image")
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        f.write(labels.astype(np.uint8).tobytes())


def synth_dataset(
    classes: int,
    per_class: int,
    dimension: int,
    seed: int,
    mean_scale: float = 3.0,
    noise: float = 1.0,
    means: np.ndarray | None = None,
) -> Dataset:
    """Gaussian class blobs with fixed per-class means, deterministic per seed.

    Means default to seeded unit-norm directions scaled by ``mean_scale``;
    well-spread means make the classes linearly separable.
    """
    if classes <= 0 or dimension <= 0 or per_class < 0:
        raise ValueError("classes and dimension must be positive, per_class >= 0")
    rng = np.random.default_rng(seed)
    if means is None:
        means = rng.standard_normal((classes, dimension))
        means /= np.linalg.norm(means, axis=1, keepdims=True)
        means *= mean_scale
    else:
        means = np.asarray(means, dtype=np.float64)
        if means.shape != (classes, dimension):
            raise ValueError(f"means must have shape {(classes, dimension)}")
    xs = []
    labels = []
    for c in range(classes):
        xs.append(means[c] + noise * rng.standard_normal((per_class, dimension)))
        labels.extend([c] * per_class)
    x = (
        np.concatenate(xs).astype(np.float32)
        if xs and per_class
        else np.zeros((0, dimension), dtype=np.float32)
    )
    return Dataset(x=x, labels=np.asarray(labels, dtype=np.int64))


# --- LSNF logit fixtures -----------------------------------------------------


@dataclass(frozen=True)
class FixtureBundle:
    inputs: np.ndarray  # float32, (n, ...) held-out inputs
    labels: np.ndarray  # int64, (n,)
    logits: np.ndarray  # float32, (n, class_count) exporter logits


def load_fixture(path) -> FixtureBundle:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != FIXTURE_MAGIC:
        raise ModelFormatError(f"bad fixture magic {data[:4]!r}", 0)
    (version,) = struct.unpack_from("<H", data, 4)
    if version != VERSION:
        raise ModelFormatError(f"unsupported fixture version {version}", 4)
    count, class_count, ndim = struct.unpack_from("<III", data, 6)
    dims = struct.unpack_from(f"<{ndim}I", data, 18)
    pos = 18 + 4 * ndim
    item = int(np.prod(dims))
    inputs = np.zeros((count, *dims), dtype=np.float32)
    labels = np.zeros(count, dtype=np.int64)
    logits = np.zeros((count, class_count), dtype=np.float32)
    for i in range(count):
        if pos + 4 + 4 * (item + class_count) > len(data):
            raise ModelFormatError(f"truncated fixture item {i}", pos)
        (labels[i],) = struct.unpack_from("<I", data, pos)
        pos += 4
        inputs[i] = np.frombuffer(data, dtype="<f4", count=item, offset=pos).reshape(dims)
        pos += 4 * item
        logits[i] = np.frombuffer(data, dtype="<f4", count=class_count, offset=pos)
        pos += 4 * class_count
    return FixtureBundle(inputs=inputs, labels=labels, logits=logits)


# --- campaign configuration ---------------------------------------------------

_MODES = ("nontargeted", "targeted")
_SELECTIONS = ("dependent", "independent", "random_elements")
_GRANULARITIES = ("element", "part", "exponent", "mantissa", "bit")
_INJECTIONS = ("device", "precise")


def _span(lo, hi, what="value"):
    def check(v):
        if not lo <= v <= hi:
            raise ValueError(f"{what} {v} outside [{lo}, {hi}]")
        return v

    return check


def _choice(options):
    def check(v):
        if v not in options:
            raise ValueError(f"{v!r} not one of {options}")
        return v

    return check


def _range_pair(text: str) -> tuple[float, float]:
    lo, _, hi = text.partition(":")
    lo, hi = float(lo), float(hi)
    if not lo < hi:
        raise ValueError(f"range {text!r} must be lo:hi with lo < hi")
    return lo, hi


# key -> (parser, validator, default); default None and no entry means required
CONFIG_SCHEMA = {
    "model": (str, None, None),
    "images": (str, None, None),
    "labels": (str, None, None),
    "mode": (str, _choice(_MODES), "nontargeted"),
    "target_class": (int, _span(0, 9999, "target_class"), None),
    "n": (int, _span(1, 10000, "n"), 10),
    "granularity": (str, _choice(_GRANULARITIES), "element"),
    "search": (str, _choice(_SELECTIONS), "dependent"),
    "injection": (str, _choice(_INJECTIONS), "device"),
    "sample_size": (int, _span(1, 256, "sample_size"), 32),
    "trials": (int, _span(1, 10_000_000, "trials"), 1000),
    "pool": (int, _span(1, 100_000, "pool"), 100),
    "seed": (int, None, 0),
    "jobs": (int, _span(1, 256, "jobs"), 1),
    "profile": (str, None, "default"),
    "profile_file": (str, None, None),
    "out_dir": (str, None, None),
    "fault_f_c": (float, _span(1, 100_000, "fault_f_c"), 3600.0),
    "fault_v_c": (float, _span(1, 100_000, "fault_v_c"), 1100.0),
    "fault_f_g": (float, _span(1, 100_000, "fault_f_g"), 1000.0),
    "fault_v_g": (float, _span(1, 100_000, "fault_v_g"), 840.0),
    "fault_f_h": (float, _span(1, 100_000, "fault_f_h"), 1235.0),
    "fault_v_l": (float, _span(1, 100_000, "fault_v_l"), 710.0),
    "fault_t_w": (float, _span(0, 1e9, "fault_t_w"), 0.0),
    "fault_t_d": (float, _span(0.001, 10_000, "fault_t_d"), 2.0),
    "range_f_h": (_range_pair, None, (1000.0, 1500.0)),
    "range_v_l": (_range_pair, None, (550.0, 1100.0)),
    "range_t_w": (_range_pair, None, (0.0, 10.0)),
    "range_t_d": (_range_pair, None, (1.0, 6.0)),
    "generations": (int, _span(1, 100_000, "generations"), 200),
    "population": (int, _span(2, 10_000, "population"), 32),
    "ga_trials": (int, _span(1, 1_000_000, "ga_trials"), 50),
    "ga_target_fitness": (float, None, None),
}


def parse_config_text(text: str) -> dict:
    """Parse flat key=value campaign configuration with '#' comments."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        parser, validator, _ = CONFIG_SCHEMA[key]
        try:
            parsed = parser(val)
            if validator is not None:
                parsed = validator(parsed)
        except ValueError as e:
            raise ConfigError(f"line {lineno}: key {key!r}: {e}") from e
        values[key] = parsed
    config = {k: spec[2] for k, spec in CONFIG_SCHEMA.items()}
    config.update(values)
    return config


def load_config(path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    config = parse_config_text(text)
    config["_sha256"] = hashlib.sha256(text.encode("utf-8")).hexdigest()
    return config


def require_keys(config: dict, keys: list[str], context: str) -> None:
    missing = [k for k in keys if config.get(k) is None]
    if missing:
        raise ConfigError(f"{context} requires config keys: {', '.join(missing)}")


_PROFILE_FLOAT_KEYS = (
    "boundary_a", "boundary_b", "sigma", "v_scale", "f_scale",
    "noresp_threshold", "noresp_width", "noresp_rate",
    "crash_threshold", "crash_width", "crash_rate",
    "fault_coeff", "cost_per_mac", "ref_frequency", "jitter",
)


def load_profile(path):
    """Device profile from a flat key=value file; ref_pairs as F:V,F:V,..."""
    from .device import DeviceProfile

    fields = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            try:
                if key == "ref_pairs":
                    fields[key] = tuple(
                        (float(p.split(":")[0]), float(p.split(":")[1]))
                        for p in val.split(",")
                    )
                elif key == "seed":
                    fields[key] = int(val)
                elif key in _PROFILE_FLOAT_KEYS:
                    fields[key] = float(val)
                else:
                    raise ConfigError(f"line {lineno}: unknown profile key {key!r}")
            except (ValueError, IndexError) as e:
                raise ConfigError(f"line {lineno}: profile key {key!r}: {e}") from e
    missing = [
        k for k in ("ref_pairs",) + _PROFILE_FLOAT_KEYS if k not in fields
    ]
    if missing:
        raise ConfigError(f"profile file missing keys: {', '.join(missing)}")
    return DeviceProfile(**fields)


# --- result serialization ------------------------------------------------------


def provenance_line(seed, config_hash: str = "-", tool_version: str = "0.1.0") -> str:
    return f"glitchsim v{tool_version} seed={seed} config_sha256={config_hash}"


def write_csv(path, header: list[str], rows, provenance: str) -> None:
    def fmt(v):
        if isinstance(v, float):
            return repr(v)
        return str(v)

    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(f"# {provenance}\n")
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(fmt(v) for v in row) + "\n")


def write_jsonl(path, records, provenance: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps({"provenance": provenance}, sort_keys=True) + "\n")
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path) -> tuple[str, list[dict]]:
    records = []
    provenance = ""
    with open(path, "r", encoding="utf-8") as f:
        for i, line in enumerate(f):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if i == 0 and "provenance" in rec:
                provenance = rec["provenance"]
                continue
            records.append(rec)
    return provenance, records


def write_sensitivity_csv(path, table, provenance: str) -> None:
    rows = [
        (t.addr.layer, t.addr.index, t.granularity.value,
         "" if t.anchor_bit is None else t.anchor_bit, s)
        for t, s in table.entries
    ]
    write_csv(path, ["layer", "element", "granularity", "anchor_bit", "S"], rows, provenance)


def write_confusion_csv(path, matrix: np.ndarray, provenance: str) -> None:
    n = matrix.shape[0]
    header = ["true\\pred"] + [str(c) for c in range(n)]
    rows = [[str(r)] + [int(v) for v in matrix[r]] for r in range(n)]
    write_csv(path, header, rows, provenance)
