"""File formats, dataset manifests and the synthetic dataset generator.

All binary formats are little-endian with a 4-byte magic and three u32 dims:

* volume     ``RWV1`` + f32 data (x-fastest)
* hard seg   ``RWL1`` + u16 labels
* soft seg   ``RWS1`` + u32 K + f32 probabilities, label-major

Per-voxel prior weights (omega) are stored in the volume format.
"""

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .core import HardSeg, Params, RWSegError, SoftSeg, Volume, from_grid, n_voxels
from .energy import PriorTerm, SampleModel
from .graph import LaplacianSpec, build_laplacian, default_family
from .learn import Sample, soften_distance_transform

VOLUME_MAGIC = b"RWV1"
SEG_MAGIC = b"RWL1"
SOFT_MAGIC = b"RWS1"
_HEADER = struct.Struct("<4s3I")
MAX_VOXELS = 1 << 31


class FormatError(RWSegError, ValueError):
    pass


class BadMagic(FormatError):
    pass


class TruncatedFile(FormatError):
    pass


class InvalidDims(FormatError):
    pass


class ManifestError(RWSegError, ValueError):
    pass


def _check_header_dims(dims):
    if any(d == 0 for d in dims):
        raise InvalidDims(f"zero dimension in {dims}")
    if n_voxels(dims) > MAX_VOXELS:
        raise InvalidDims(f"dims {dims} overflow the voxel limit")


def _read_header(buf, magic):
    if len(buf) < _HEADER.size:
        raise TruncatedFile("file shorter than its header")
    got, nx, ny, nz = _HEADER.unpack_from(buf, 0)
    if got != magic:
        raise BadMagic(f"expected magic {magic!r}, found {got!r}")
    dims = (nx, ny, nz)
    _check_header_dims(dims)
    return dims


def _payload(buf, offset, count, dtype):
    need = offset + count * np.dtype(dtype).itemsize
    if len(buf) < need:
        raise TruncatedFile(f"expected {need} bytes, file has {len(buf)}")
    if len(buf) > need:
        raise FormatError(f"{len(buf) - need} trailing bytes")
    return np.frombuffer(buf, dtype=dtype, count=count, offset=offset)


def _header(magic, dims):
    dims = tuple(int(d) for d in dims)
    _check_header_dims(dims)
    return _HEADER.pack(magic, *dims)


def volume_bytes(v: Volume) -> bytes:
    return _header(VOLUME_MAGIC, v.dims) + v.data.astype("<f4").tobytes()


def volume_from_bytes(buf: bytes) -> Volume:
    dims = _read_header(buf, VOLUME_MAGIC)
    return Volume(dims, _payload(buf, _HEADER.size, n_voxels(dims), "<f4").astype(np.float64))


def seg_bytes(z: HardSeg) -> bytes:
    if z.K > 65536:
        raise FormatError("label count exceeds the u16 range")
    return _header(SEG_MAGIC, z.dims) + z.labels.astype("<u2").tobytes()


def seg_from_bytes(buf: bytes, K: Optional[int] = None) -> HardSeg:
    dims = _read_header(buf, SEG_MAGIC)
    labels = _payload(buf, _HEADER.size, n_voxels(dims), "<u2").astype(np.int64)
    if K is None:
        K = max(2, int(labels.max()) + 1)
    return HardSeg(dims, labels, K)


def soft_bytes(y: SoftSeg) -> bytes:
    return (_header(SOFT_MAGIC, y.dims) + struct.pack("<I", y.K)
            + y.probs.astype("<f4").tobytes())


def soft_from_bytes(buf: bytes) -> SoftSeg:
    dims = _read_header(buf, SOFT_MAGIC)
    if len(buf) < _HEADER.size + 4:
        raise TruncatedFile("missing label count")
    (K,) = struct.unpack_from("<I", buf, _HEADER.size)
    if K < 2:
        raise InvalidDims(f"soft segmentation needs K >= 2, header says {K}")
    n = n_voxels(dims)
    probs = _payload(buf, _HEADER.size + 4, K * n, "<f4").astype(np.float64)
    return SoftSeg(dims, probs.reshape(K, n))


def _write(path, data: bytes):
    Path(path).write_bytes(data)


def save_volume(path, v: Volume):
    _write(path, volume_bytes(v))


def load_volume(path) -> Volume:
    return volume_from_bytes(Path(path).read_bytes())


def save_seg(path, z: HardSeg):
    _write(path, seg_bytes(z))


def load_seg(path, K: Optional[int] = None) -> HardSeg:
    return seg_from_bytes(Path(path).read_bytes(), K)


def save_soft(path, y: SoftSeg):
    _write(path, soft_bytes(y))


def load_soft(path) -> SoftSeg:
    return soft_from_bytes(Path(path).read_bytes())


def save_weights(path, w: Params):
    Path(path).write_text(json.dumps(w.to_dict(), indent=2) + "\n")


def load_weights(path) -> Params:
    return Params.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass
class Manifest:
    labels: int
    laplacian_specs: List[LaplacianSpec]
    samples: List[dict]
    split: dict
    root: Path = Path(".")
    planted_weights: Optional[Params] = None
    label_names: Optional[List[str]] = None

    def to_dict(self):
        d = {
            "labels": self.labels,
            "laplacian_specs": [s.to_dict() for s in self.laplacian_specs],
            "samples": self.samples,
            "split": self.split,
        }
        if self.label_names is not None:
            d["label_names"] = self.label_names
        if self.planted_weights is not None:
            d["planted_weights"] = self.planted_weights.to_dict()
        return d

    def write(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> Manifest:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    try:
        specs = [LaplacianSpec.from_dict(s) for s in d["laplacian_specs"]]
        samples = list(d["samples"])
        K = int(d["labels"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"malformed manifest {path}: {exc}") from exc
    split = d.get("split") or {"train": list(range(len(samples))), "test": []}
    planted = Params.from_dict(d["planted_weights"]) if d.get("planted_weights") else None
    n_priors = {len(s.get("priors", [])) for s in samples}
    if len(n_priors) > 1:
        raise ManifestError("every sample must list the same number of priors")
    for part in ("train", "test"):
        for k in split.get(part, []):
            if not 0 <= int(k) < len(samples):
                raise ManifestError(f"split {part!r} references missing sample {k}")
    return Manifest(K, specs, samples, split, path.parent, planted, d.get("label_names"))


def _sample_from_entry(man: Manifest, k: int, entry: dict) -> Sample:
    def where(field_name):
        return f"sample {k} ({entry.get('id', k)}), field {field_name!r}"

    def resolve(rel, field_name):
        p = man.root / rel
        if not p.exists():
            raise ManifestError(f"{where(field_name)}: missing file {p}")
        return p

    try:
        x = load_volume(resolve(entry["volume"], "volume"))
    except FormatError as exc:
        raise ManifestError(f"{where('volume')}: {exc}") from exc
    try:
        z = load_seg(resolve(entry["hard_seg"], "hard_seg"), man.labels)
    except (FormatError, ValueError) as exc:
        raise ManifestError(f"{where('hard_seg')}: {exc}") from exc
    if z.dims != x.dims:
        raise ManifestError(f"{where('hard_seg')}: dims {z.dims} differ from volume dims {x.dims}")
    priors = []
    for b, pe in enumerate(entry.get("priors", [])):
        try:
            y_ref = load_soft(resolve(pe["y_ref"], f"priors[{b}].y_ref"))
        except FormatError as exc:
            raise ManifestError(f"{where(f'priors[{b}].y_ref')}: {exc}") from exc
        if y_ref.dims != x.dims or y_ref.K != man.labels:
            raise ManifestError(f"{where(f'priors[{b}].y_ref')}: shape does not match the volume")
        # float32 storage leaves round-off on the simplex
        y_ref = SoftSeg.normalized(y_ref.dims, y_ref.probs)
        om = pe.get("omega", "uniform")
        if om == "uniform":
            omega = np.ones(x.n)
        else:
            ov = load_volume(resolve(om, f"priors[{b}].omega"))
            if ov.dims != x.dims:
                raise ManifestError(f"{where(f'priors[{b}].omega')}: dims differ from the volume")
            omega = ov.data
        priors.append(PriorTerm(y_ref, omega))
    if not priors:
        raise ManifestError(f"{where('priors')}: at least one prior is required")
    laps = [build_laplacian(x, s) for s in man.laplacian_specs]
    return Sample(SampleModel(x, laps, priors, man.labels), z, str(entry.get("id", k)))


def load_dataset(path) -> Tuple[List[Sample], dict, Manifest]:
    """Load every sample of a manifest; returns ``(samples, split, manifest)``."""
    man = read_manifest(path)
    samples = [_sample_from_entry(man, k, e) for k, e in enumerate(man.samples)]
    split = {"train": [int(k) for k in man.split.get("train", [])],
             "test": [int(k) for k in man.split.get("test", [])]}
    return samples, split, man


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    dims: Tuple[int, int, int] = (16, 16, 2)
    K: int = 3
    n_samples: int = 15
    blob_count: Optional[int] = None  # None -> K - 1
    noise_sigma: float = 0.15
    prior_corruption: float = 0.2
    prior_tau: float = 1.0
    corruption_length: float = 1.5
    seed: int = 0
    train_fraction: float = 0.8
    # per-prior multipliers of prior_corruption, one prior per entry
    corruption_scale: Sequence[float] = (0.5, 1.0, 2.0)
    laplacian_specs: Sequence[LaplacianSpec] = field(default_factory=default_family)

    def __post_init__(self):
        if any(int(d) <= 0 for d in self.dims) or len(self.dims) != 3:
            raise ValueError("dims must be three positive integers")
        if self.K < 2:
            raise ValueError("K must be at least 2")
        if self.n_samples < 1:
            raise ValueError("need at least one sample")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if not 0 <= self.prior_corruption < 1:
            raise ValueError("prior_corruption must lie in [0, 1)")
        if not 0 < self.train_fraction <= 1:
            raise ValueError("train_fraction must lie in (0, 1]")


def _blob_labels(rng, dims, K, blob_count):
    nx, ny, nz = dims
    gx, gy, gz = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    lab = np.zeros(dims, dtype=np.int64)
    taken = np.zeros(dims, dtype=bool)
    for b in range(blob_count):
        s = 1 + b % (K - 1)
        c = rng.uniform(0.2, 0.8, size=3) * np.array(dims) - 0.5
        r = rng.uniform(0.18, 0.38, size=3) * np.array(dims)
        r[2] = max(r[2], nz)  # thin slabs: extend through z
        inside = ((gx - c[0]) / r[0]) ** 2 + ((gy - c[1]) / r[1]) ** 2 + ((gz - c[2]) / r[2]) ** 2 <= 1.0
        inside &= ~taken
        lab[inside] = s
        taken |= inside
    return lab


def _smooth_field(rng, dims, amplitude):
    g = rng.standard_normal(dims)
    g = ndimage.gaussian_filter(g, sigma=[max(d / 4.0, 0.5) for d in dims], mode="wrap")
    sd = g.std()
    return amplitude * g / sd if sd > 0 else np.zeros(dims)


def _corrupt(rng, labels, K, rate, length):
    """Flip a fraction ``rate`` of voxels to another label.

    With ``length > 0`` the flipped set and the replacement labels are
    spatially coherent patches of that correlation length (in voxels).
    """
    out = labels.copy()
    if rate <= 0:
        return out
    dims = labels.shape
    if length > 0:
        sig = [min(length, max(d / 2.0, 0.5)) for d in dims]
        f = ndimage.gaussian_filter(rng.standard_normal(dims), sigma=sig, mode="wrap")
        flip = f > np.quantile(f, 1.0 - rate)
        g = ndimage.gaussian_filter(rng.standard_normal(dims), sigma=sig, mode="wrap")
        ranks = np.argsort(np.argsort(g, axis=None)).reshape(dims) / g.size
        shift = 1 + np.minimum((ranks * (K - 1)).astype(np.int64), K - 2)
    else:
        flip = rng.random(dims) < rate
        shift = rng.integers(1, K, size=dims)
    out[flip] = (labels[flip] + shift[flip]) % K
    return out


def planted_weights(cfg: SynthConfig) -> Params:
    """Weights reflecting how the data were generated.

    Contrast terms favour the intensity kernels (the classes differ in mean
    intensity); prior weights fall with each prior's corruption rate.
    """
    n_alpha = len(cfg.laplacian_specs)
    alpha = np.array([1.0 if s.feature == "intensity" else 0.25 for s in cfg.laplacian_specs])
    rates = np.clip(cfg.prior_corruption * np.asarray(cfg.corruption_scale, dtype=float), 0, 0.99)
    beta = (1.0 - rates) ** 4
    v = np.concatenate([alpha, beta])
    return Params.from_vector(v / v.sum(), n_alpha)


def synth_sample(cfg: SynthConfig, rng):
    """One (volume, hard seg, priors) triple drawn from ``rng``."""
    dims = tuple(int(d) for d in cfg.dims)
    blobs = cfg.blob_count if cfg.blob_count is not None else cfg.K - 1
    lab = _blob_labels(rng, dims, cfg.K, blobs)
    means = np.linspace(0.0, 1.0, cfg.K)
    img = means[lab] + _smooth_field(rng, dims, 0.05)
    if cfg.noise_sigma > 0:
        img = img + rng.normal(0.0, cfg.noise_sigma, size=dims)
    z = HardSeg(dims, from_grid(lab), cfg.K)
    priors = []
    for scale in cfg.corruption_scale:
        rate = min(cfg.prior_corruption * float(scale), 0.99)
        zc = HardSeg(dims, from_grid(_corrupt(rng, lab, cfg.K, rate, cfg.corruption_length)), cfg.K)
        priors.append(soften_distance_transform(zc, cfg.prior_tau))
    return Volume(dims, from_grid(img)), z, priors


def synth_generate(cfg: SynthConfig, out_dir) -> Manifest:
    """Write a seeded synthetic dataset and its manifest into ``out_dir``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise RWSegError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise RWSegError(f"output directory {out} is not writable")
    rng = np.random.default_rng(cfg.seed)
    entries = []
    for k in range(cfg.n_samples):
        x, z, priors = synth_sample(cfg, rng)
        sid = f"s{k:03d}"
        save_volume(out / f"{sid}_vol.rwv", x)
        save_seg(out / f"{sid}_seg.rwl", z)
        pe = []
        for b, y in enumerate(priors):
            save_soft(out / f"{sid}_prior{b}.rws", y)
            pe.append({"y_ref": f"{sid}_prior{b}.rws", "omega": "uniform"})
        entries.append({"id": sid, "volume": f"{sid}_vol.rwv", "hard_seg": f"{sid}_seg.rwl",
                        "priors": pe})
    n_train = max(1, int(round(cfg.train_fraction * cfg.n_samples)))
    if n_train == cfg.n_samples and cfg.n_samples > 1 and cfg.train_fraction < 1:
        n_train -= 1
    split = {"train": list(range(n_train)), "test": list(range(n_train, cfg.n_samples))}
    man = Manifest(cfg.K, list(cfg.laplacian_specs), entries, split, out, planted_weights(cfg))
    man.write(out / "manifest.json")
    return man
