"""Datasets, run configuration, and on-disk formats.

Everything a run touches on disk goes through here: dataset CSVs, IDX files,
flat key = value config files, binary checkpoints, JSON-lines metrics, and
SVG figures (built as plain strings so no renderer is needed).
"""

from __future__ import annotations

import json
import math
import os
import struct
import zlib
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import diffcore as dc

SEED_ENV_VAR = "MANIFOLD_ADVGEN_SEED"


def subseed(*parts):
    """Derive a stable child seed from integer or string parts."""
    ints = []
    for p in parts:
        if isinstance(p, str):
            ints.append(zlib.crc32(p.encode("utf-8")))
        else:
            ints.append(int(p) & 0xFFFFFFFF)
    return int(np.random.SeedSequence(ints).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Datasets


@dataclass
class LabeledDataset:
    """Feature matrix with integer labels and a fixed train/test split."""

    x: np.ndarray
    y: np.ndarray
    train_idx: np.ndarray
    test_idx: np.ndarray
    name: str = "dataset"

    def __post_init__(self):
        self.x = dc.tensor(self.x)
        self.y = np.asarray(self.y, dtype=np.intp)
        self.train_idx = np.asarray(self.train_idx, dtype=np.intp)
        self.test_idx = np.asarray(self.test_idx, dtype=np.intp)
        if self.x.ndim != 2 or self.y.shape != (self.x.shape[0],):
            raise dc.ConfigError("features must be (n, d) with one label per row")
        n = self.x.shape[0]
        joined = np.sort(np.concatenate([self.train_idx, self.test_idx]))
        if not np.array_equal(joined, np.arange(n)):
            raise dc.ConfigError("train/test indices must partition the rows")

    @property
    def n_classes(self):
        return int(self.y.max()) + 1

    def train(self):
        return self.x[self.train_idx], self.y[self.train_idx]

    def test(self):
        return self.x[self.test_idx], self.y[self.test_idx]


def gen_swiss_roll(n_points=1600, n_classes=4, noise_sd=0.4, seed=1,
                   test_fraction=0.2):
    """Swiss Roll points with arc-position class labels.

    The roll parameter t is uniform on [1.5*pi, 4.5*pi]; points are
    (t cos t, height, t sin t) with height uniform on [0, 21] plus isotropic
    Gaussian coordinate noise. Labels split the points into equally sized
    groups by the rank of t (smallest t is class 0), so classes are balanced
    by construction. Coordinates are standardized per axis over the full set.
    """
    if n_points % n_classes != 0:
        raise dc.ConfigError(
            f"{n_points} points cannot split into {n_classes} equal classes"
        )
    rng = np.random.default_rng(seed)
    t = rng.uniform(1.5 * np.pi, 4.5 * np.pi, size=n_points)
    height = rng.uniform(0.0, 21.0, size=n_points)
    x = np.column_stack((t * np.cos(t), height, t * np.sin(t)))
    x = x + rng.normal(0.0, noise_sd, size=x.shape)

    order = np.argsort(t, kind="stable")
    y = np.empty(n_points, dtype=np.intp)
    per_class = n_points // n_classes
    y[order] = np.arange(n_points) // per_class

    x = (x - x.mean(axis=0)) / x.std(axis=0)

    split_rng = np.random.default_rng(subseed(seed, "split"))
    perm = split_rng.permutation(n_points)
    n_test = int(round(n_points * test_fraction))
    return LabeledDataset(x, y, np.sort(perm[n_test:]), np.sort(perm[:n_test]),
                          name="swiss_roll")


def save_dataset_csv(dataset: LabeledDataset, path):
    """Write x columns, label, and split membership with 17 significant digits."""
    d = dataset.x.shape[1]
    split = np.full(dataset.x.shape[0], "train", dtype=object)
    split[dataset.test_idx] = "test"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(f"x{i + 1}" for i in range(d)) + ",label,split\n")
        for row, label, part in zip(dataset.x, dataset.y, split):
            cells = [format(v, ".17g") for v in row]
            fh.write(",".join(cells) + f",{int(label)},{part}\n")


def load_dataset_csv(path, name="dataset"):
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if header[-2:] != ["label", "split"]:
            raise dc.ConfigError(f"unexpected dataset header {header}")
        d = len(header) - 2
        xs, ys, parts = [], [], []
        for line in fh:
            cells = line.strip().split(",")
            if len(cells) != d + 2:
                raise dc.ConfigError(f"bad dataset row: {line.strip()!r}")
            xs.append([float(c) for c in cells[:d]])
            ys.append(int(cells[d]))
            parts.append(cells[d + 1])
    parts = np.asarray(parts)
    idx = np.arange(len(xs))
    return LabeledDataset(np.asarray(xs), np.asarray(ys),
                          idx[parts == "train"], idx[parts == "test"],
                          name=name)


# ---------------------------------------------------------------------------
# IDX binary format

_IDX_UBYTE = 0x08


def load_idx(path):
    """Parse one IDX file into an ndarray.

    Unsigned-byte payloads are scaled to [0, 1]. Malformed magic bytes and
    truncated payloads raise ConfigError with the offending byte offset.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise dc.ConfigError(
            f"{path}: truncated header, {len(blob)} bytes at offset 0"
        )
    if blob[0] != 0 or blob[1] != 0:
        raise dc.ConfigError(
            f"{path}: bad magic bytes {blob[0]:#04x} {blob[1]:#04x} at offset 0"
        )
    type_code, ndim = blob[2], blob[3]
    if type_code != _IDX_UBYTE:
        raise dc.ConfigError(
            f"{path}: unsupported type code {type_code:#04x} at offset 2"
        )
    header_end = 4 + 4 * ndim
    if len(blob) < header_end:
        raise dc.ConfigError(
            f"{path}: truncated dimension header at offset {len(blob)}"
        )
    dims = struct.unpack(f">{ndim}I", blob[4:header_end])
    want = 1
    for s in dims:
        want *= s
    payload = blob[header_end:]
    if len(payload) != want:
        raise dc.ConfigError(
            f"{path}: payload of {want} bytes expected, got {len(payload)} "
            f"(offset {header_end})"
        )
    data = np.frombuffer(payload, dtype=np.uint8).reshape(dims)
    return data.astype(np.float64) / 255.0


def load_idx_dataset(images_path, labels_path, test_fraction=0.2, seed=1):
    """Compose a LabeledDataset from an IDX image file and an IDX label file."""
    images = load_idx(images_path)
    labels = (load_idx(labels_path) * 255.0).round().astype(np.intp)
    if labels.ndim != 1 or labels.shape[0] != images.shape[0]:
        raise dc.ConfigError("images and labels disagree on example count")
    flat = images.reshape(images.shape[0], -1)
    rng = np.random.default_rng(subseed(seed, "idx-split"))
    perm = rng.permutation(flat.shape[0])
    n_test = int(round(flat.shape[0] * test_fraction))
    return LabeledDataset(flat, labels, np.sort(perm[n_test:]),
                          np.sort(perm[:n_test]), name="mnist_idx")


# ---------------------------------------------------------------------------
# Run configuration


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs; file keys are exactly these field names."""

    dataset: str = "swiss_roll"
    n_points: int = 1600
    n_classes: int = 4
    noise_sd: float = 0.4
    test_fraction: float = 0.2

    latent_dim: int = 2
    encoder_hidden: tuple = (40, 40)
    decoder_hidden: tuple = (40, 40)
    hyper_input_dim: int = 50
    hyper_hidden: tuple = (60, 70)
    classifier_hidden: tuple = (32, 32)

    n_particles: int = 5
    epochs: int = 1000
    batch_size: int = 64
    inner_updates: int = 3

    lr_decoder: float = 5e-4
    lr_clean_hyper: float = 1e-3
    lr_perturb_hyper: float = 1e-3
    lr_inner_clean: float = 1e-2
    lr_inner_perturb: float = 1e-2
    svgd_step: float = 1e-3
    gbsm_step: float = 1e-2
    pgd_step: float = 0.075
    pgd_steps: int = 40

    eps_attack: float = 0.3
    max_tries: int = 10
    literal_adv_sign: bool = False

    gamma_a: float = 1.0
    gamma_b: float = 0.1
    lambda_a: float = 1.0
    lambda_b: float = 1.0

    data_seed: int = 1
    init_seed: int = 2
    train_seed: int = 3

    out_dir: str = "runs"
    checkpoint_every: int = 50
    threads: int = 1

    def __post_init__(self):
        if self.dataset not in ("swiss_roll", "mnist_idx"):
            raise dc.ConfigError(f"unknown dataset {self.dataset!r}")
        for name in ("n_points", "n_classes", "latent_dim", "n_particles",
                     "epochs", "batch_size", "inner_updates", "max_tries",
                     "pgd_steps", "checkpoint_every", "threads"):
            if getattr(self, name) < 1:
                raise dc.ConfigError(f"{name} must be positive")
        if not (0.0 < self.test_fraction < 1.0):
            raise dc.ConfigError("test_fraction must be in (0, 1)")
        if self.eps_attack <= 0.0:
            raise dc.ConfigError("eps_attack must be positive")
        for name in ("lr_decoder", "lr_clean_hyper", "lr_perturb_hyper",
                     "lr_inner_clean", "lr_inner_perturb", "svgd_step",
                     "gbsm_step", "pgd_step"):
            if getattr(self, name) <= 0.0:
                raise dc.ConfigError(f"{name} must be positive")


_BOOL_WORDS = {"true": True, "false": False, "1": True, "0": False,
               "yes": True, "no": False}


def _coerce(name, raw, target_type):
    raw = raw.strip()
    try:
        if target_type is bool:
            return _BOOL_WORDS[raw.lower()]
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        if target_type is tuple:
            if raw == "":
                return ()
            return tuple(int(p.strip()) for p in raw.split(","))
        return raw
    except (ValueError, KeyError):
        raise dc.ConfigError(f"config key {name!r}: cannot parse {raw!r}")


def parse_config(text):
    """Parse flat `key = value` lines into a RunConfig.

    Blank lines and # comments are skipped; unknown keys are rejected.
    """
    by_name = {f.name: f for f in fields(RunConfig)}
    overrides = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise dc.ConfigError(f"config line {lineno}: expected key = value")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in by_name:
            raise dc.ConfigError(f"config line {lineno}: unknown key {key!r}")
        ftype = by_name[key].type
        target = {"str": str, "int": int, "float": float, "tuple": tuple,
                  "bool": bool}.get(ftype if isinstance(ftype, str) else ftype.__name__, str)
        overrides[key] = _coerce(key, raw, target)
    return build_config(**overrides)


def load_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def build_config(**overrides):
    """Construct a RunConfig; the seed env var trumps all configured seeds."""
    known = {f.name for f in fields(RunConfig)}
    unknown = set(overrides) - known
    if unknown:
        raise dc.ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = RunConfig(**overrides)
    env = os.environ.get(SEED_ENV_VAR)
    if env is not None:
        try:
            forced = int(env)
        except ValueError:
            raise dc.ConfigError(f"{SEED_ENV_VAR} must be an integer, got {env!r}")
        cfg = replace(cfg, data_seed=forced, init_seed=forced, train_seed=forced)
    return cfg


# ---------------------------------------------------------------------------
# Checkpoints: named sections of flat float64 arrays

_CKPT_MAGIC = b"MAGC"
_CKPT_VERSION = 1


def save_arrays(path, arrays):
    """Write named float64 arrays with length-prefixed names and shape headers."""
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(np.asarray(arr, dtype=np.float64))
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_arrays(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _CKPT_MAGIC:
        raise dc.ConfigError(f"{path}: not a checkpoint file")
    version, count = struct.unpack("<II", blob[4:12])
    if version != _CKPT_VERSION:
        raise dc.ConfigError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", blob[off:off + 4])
        off += 4
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack("<I", blob[off:off + 4])
        off += 4
        shape = struct.unpack(f"<{ndim}I", blob[off:off + 4 * ndim])
        off += 4 * ndim
        size = 1
        for s in shape:
            size *= s
        arr = np.frombuffer(blob[off:off + 8 * size], dtype="<f8").reshape(shape)
        off += 8 * size
        out[name] = arr.copy()
    if off != len(blob):
        raise dc.ConfigError(f"{path}: {len(blob) - off} trailing bytes")
    return out


# ---------------------------------------------------------------------------
# Metrics JSON-lines

METRIC_KEYS = ("epoch", "L_rec_clean", "L_rec_adv", "adv_term",
               "asr_train_batch", "delta_norms", "bandwidth",
               "match_loss_eta", "match_loss_eta_prime")


def metrics_line(values):
    """One JSON object per epoch with a fixed key order."""
    missing = set(METRIC_KEYS) - set(values)
    if missing:
        raise dc.ConfigError(f"metrics line missing keys: {sorted(missing)}")
    ordered = {}
    for key in METRIC_KEYS:
        v = values[key]
        if key == "epoch":
            ordered[key] = int(v)
        elif key == "delta_norms":
            ordered[key] = [float(u) for u in v]
        else:
            ordered[key] = float(v)
    return json.dumps(ordered)


def read_metrics(path):
    with open(path, "r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# SVG figures

_PALETTE = ("#1b6ca8", "#e4572e", "#43aa8b", "#8e4fa8",
            "#f4a300", "#4f5d75", "#c81d52", "#2e86ab")

_PANEL = 300
_MARGIN = 46


def _bounds(point_sets):
    pts = [p for p in point_sets if p is not None and len(p)]
    if not pts:
        return -1.0, 1.0, -1.0, 1.0
    allp = np.vstack(pts)
    x0, y0 = allp.min(axis=0)
    x1, y1 = allp.max(axis=0)
    padx = 0.05 * (x1 - x0 or 1.0)
    pady = 0.05 * (y1 - y0 or 1.0)
    return x0 - padx, x1 + padx, y0 - pady, y1 + pady


def _scale(v, lo, hi, size):
    if hi == lo:
        return size / 2.0
    return (v - lo) / (hi - lo) * size


def svg_scatter_panels(panels, path, title=""):
    """Side-by-side scatter panels sharing one coordinate frame.

    panels: list of (subtitle, points (n, 2) or None, labels (n,) or None).
    Empty panels still render their frame so missing stages stay visible.
    """
    bx0, bx1, by0, by1 = _bounds([p for _, p, _ in panels])
    width = len(panels) * (_PANEL + _MARGIN) + _MARGIN
    height = _PANEL + 2 * _MARGIN + 18
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" '
        f'font-size="14" font-family="sans-serif">{title}</text>',
    ]
    for i, (subtitle, points, labels) in enumerate(panels):
        ox = _MARGIN + i * (_PANEL + _MARGIN)
        oy = _MARGIN + 18
        parts.append(
            f'<rect x="{ox}" y="{oy}" width="{_PANEL}" height="{_PANEL}" '
            f'fill="none" stroke="#444"/>'
        )
        parts.append(
            f'<text x="{ox + _PANEL / 2:.1f}" y="{oy - 6}" text-anchor="middle" '
            f'font-size="12" font-family="sans-serif">{subtitle}</text>'
        )
        if points is None or len(points) == 0:
            continue
        points = np.asarray(points, dtype=np.float64)
        if labels is None:
            labels = np.zeros(len(points), dtype=int)
        for (px, py), lab in zip(points, labels):
            cx = ox + _scale(px, bx0, bx1, _PANEL)
            cy = oy + _PANEL - _scale(py, by0, by1, _PANEL)
            color = _PALETTE[int(lab) % len(_PALETTE)]
            parts.append(
                f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="2" fill="{color}" '
                f'fill-opacity="0.75"/>'
            )
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts))
    return path


def svg_marginal_hist(clean, perturbed, path, n_bins=30, title=""):
    """Per-dimension overlaid histograms of clean vs perturbed samples."""
    clean = np.asarray(clean, dtype=np.float64)
    perturbed = np.asarray(perturbed, dtype=np.float64)
    dims = clean.shape[1] if clean.ndim == 2 and clean.size else 0
    width = max(dims, 1) * (_PANEL + _MARGIN) + _MARGIN
    height = _PANEL + 2 * _MARGIN + 18
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" '
        f'font-size="14" font-family="sans-serif">{title}</text>',
    ]
    for dim in range(dims):
        ox = _MARGIN + dim * (_PANEL + _MARGIN)
        oy = _MARGIN + 18
        parts.append(
            f'<rect x="{ox}" y="{oy}" width="{_PANEL}" height="{_PANEL}" '
            f'fill="none" stroke="#444"/>'
        )
        a = clean[:, dim]
        b = perturbed[:, dim] if perturbed.size else np.empty(0)
        lo = min(a.min(), b.min() if b.size else a.min())
        hi = max(a.max(), b.max() if b.size else a.max())
        if hi == lo:
            hi = lo + 1.0
        edges = np.linspace(lo, hi, n_bins + 1)
        for series, color in ((a, _PALETTE[0]), (b, _PALETTE[1])):
            if not series.size:
                continue
            counts, _ = np.histogram(series, bins=edges)
            peak = counts.max() or 1
            bar_w = _PANEL / n_bins
            for j, c in enumerate(counts):
                if c == 0:
                    continue
                bar_h = c / peak * (_PANEL - 10)
                parts.append(
                    f'<rect x="{ox + j * bar_w:.2f}" '
                    f'y="{oy + _PANEL - bar_h:.2f}" width="{bar_w:.2f}" '
                    f'height="{bar_h:.2f}" fill="{color}" fill-opacity="0.45"/>'
                )
        parts.append(
            f'<text x="{ox + _PANEL / 2:.1f}" y="{oy - 6}" text-anchor="middle" '
            f'font-size="12" font-family="sans-serif">dim {dim + 1}</text>'
        )
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts))
    return path


def project_2d(points, basis=None):
    """Project points to 2-D; wider inputs use the top-2 principal axes."""
    points = np.asarray(points, dtype=np.float64)
    if points.shape[1] == 2:
        return points, None
    if basis is None:
        centered = points - points.mean(axis=0)
        cov = centered.T @ centered / max(len(points) - 1, 1)
        vals, vecs = np.linalg.eigh(cov)
        basis = vecs[:, np.argsort(vals)[::-1][:2]]
    return points @ basis, basis


def export_plots(out_dir, clean_latents, clean_labels, ours_latents=None,
                 ours_labels=None, pgd_latents=None, pgd_labels=None):
    """Write the latent comparison figure and marginal histograms.

    Returns the list of files written. Missing stages render as empty panels.
    """
    os.makedirs(out_dir, exist_ok=True)
    clean_latents = np.asarray(clean_latents, dtype=np.float64)
    basis = None
    if clean_latents.size and clean_latents.shape[1] > 2:
        clean_2d, basis = project_2d(clean_latents)
    else:
        clean_2d = clean_latents

    def prep(p):
        if p is None or len(p) == 0:
            return None
        p = np.asarray(p, dtype=np.float64)
        if p.shape[1] > 2:
            p, _ = project_2d(p, basis)
        return p

    panels = [
        ("clean latents", clean_2d if clean_2d.size else None, clean_labels),
        ("perturbed latents", prep(ours_latents), ours_labels),
        ("pgd latents", prep(pgd_latents), pgd_labels),
    ]
    written = []
    fig = os.path.join(out_dir, "latent_panels.svg")
    svg_scatter_panels(panels, fig, title="latent codes by attack")
    written.append(fig)
    if ours_latents is not None and len(ours_latents):
        hist = os.path.join(out_dir, "latent_marginals.svg")
        svg_marginal_hist(clean_latents, np.asarray(ours_latents), hist,
                          title="latent marginals: clean vs perturbed")
        written.append(hist)
    return written


def save_latents_csv(path, latents, labels):
    latents = np.asarray(latents, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    d = latents.shape[1] if latents.ndim == 2 else 0
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(f"z{i + 1}" for i in range(d)) + ",label\n")
        for row, lab in zip(latents, labels):
            fh.write(",".join(format(v, ".17g") for v in row) + f",{int(lab)}\n")


def load_latents_csv(path):
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        d = len(header) - 1
        zs, ys = [], []
        for line in fh:
            cells = line.strip().split(",")
            zs.append([float(c) for c in cells[:d]])
            ys.append(int(cells[d]))
    return np.asarray(zs, dtype=np.float64), np.asarray(ys, dtype=np.intp)
