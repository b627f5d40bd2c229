"""Synthetic reassembly tasks and the on-disk dataset format.

2D puzzles cut a square image into an n x n grid of patches placed on the
[-1, 1]^2 board; 3D fragment sets cut a procedural solid with random planes
and sample 1,000 points per fragment.
"""

import hashlib
import json
import os
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import geometry as geo
from .encoders import center_piece
from .errors import ConfigError, DatasetFormatError

NUM_POINTS = 1000
SHAPE_KINDS = ("box", "cylinder", "sphere", "composite")
FORMAT_NAME = "piecediff-dataset"
FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# procedural images


def _disk(yy, xx, cy, cx, r):
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _ellipse(yy, xx, cy, cx, ry, rx):
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def synth_image(size, seed, portrait=False):
    """Structured RGB image (uint8): gradient background, figures, texture noise.

    ``portrait`` draws a centred face-like layout (oval, eyes, mouth) so the
    image has strong global structure; otherwise figures are scattered.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1.0)
    c0, c1 = rng.random(3), rng.random(3)
    ang = rng.uniform(0, 2 * np.pi)
    ramp = np.clip(0.5 + (np.cos(ang) * (xx - 0.5) + np.sin(ang) * (yy - 0.5)), 0, 1)[..., None]
    img = (1 - ramp) * c0 + ramp * c1
    # low-frequency pattern breaks symmetry inside flat regions
    fx, fy, ph = rng.uniform(2, 6), rng.uniform(2, 6), rng.uniform(0, 2 * np.pi)
    img = img + 0.08 * np.sin(2 * np.pi * (fx * xx + 0.5 * fy * yy) + ph)[..., None] * (rng.random(3) - 0.5) * 2
    if portrait:
        skin, hair, eye = rng.random(3) * 0.5 + 0.4, rng.random(3) * 0.4, rng.random(3) * 0.3
        cx = 0.5 + rng.uniform(-0.05, 0.05)
        img[_ellipse(yy, xx, 0.3, cx, 0.22, 0.3)] = hair
        img[_ellipse(yy, xx, 0.52, cx, 0.33, 0.24)] = skin
        for side in (-1, 1):
            img[_ellipse(yy, xx, 0.45, cx + side * 0.1, 0.04, 0.06)] = 1.0
            img[_disk(yy, xx, 0.45, cx + side * 0.1, 0.025)] = eye
        img[_ellipse(yy, xx, 0.68, cx, 0.035, 0.1)] = rng.random(3) * 0.5 + 0.4 * np.array([1, 0, 0])
        img[_ellipse(yy, xx, 0.57, cx, 0.07, 0.02)] = skin * 0.8
    else:
        for _ in range(rng.integers(3, 7)):
            col = rng.random(3)
            kind = rng.integers(0, 3)
            cy, cx = rng.random(2)
            s = rng.uniform(0.08, 0.3)
            if kind == 0:
                mask = _disk(yy, xx, cy, cx, s)
            elif kind == 1:
                mask = (np.abs(yy - cy) < s * rng.uniform(0.3, 1)) & (np.abs(xx - cx) < s)
            else:
                mask = (yy - cy + s > 0) & (np.abs(xx - cx) < (yy - cy + s) * 0.6) & (yy - cy < s)
            img[mask] = col
    img = img + rng.normal(0, 0.04, img.shape)
    return np.clip(np.round(img * 255), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# 2D puzzles


@dataclass
class PuzzleInstance:
    n: int
    patches: np.ndarray           # (n*n, P, P, 3) uint8, stored (possibly rotated) rasters
    gt_translations: np.ndarray   # (n*n, 2) cell centres, (x = column, y = row)
    gt_rot_index: np.ndarray      # (n*n,) quarter turns that restore each stored patch
    present: np.ndarray           # (n*n,) bool
    seed: int = 0
    perm: np.ndarray = None       # shuffled position i holds original piece perm[i]
    init_translations: np.ndarray = None
    init_rotations: np.ndarray = None

    kind = "puzzle2d"
    dim = 2

    @property
    def gt_rotations(self):
        return geo.z4_element(self.gt_rot_index)

    @property
    def num_pieces(self):
        return len(self.patches)


def generate_puzzle(image, n, rotate=True, missing_fraction=0.0, seed=0):
    img = np.asarray(image)
    H, W = img.shape[:2]
    if H != W or H % n:
        raise ConfigError(f"image {H}x{W} cannot be cut into a {n}x{n} grid")
    if (H // n) % 2:
        raise ConfigError(f"patch side {H // n} must be even")
    if not 0.0 <= missing_fraction <= 0.9:
        raise ConfigError("missing_fraction must be in [0, 0.9]")
    rng = np.random.default_rng(seed)
    P = H // n
    centres = (2.0 * np.arange(n) + 1.0) / n - 1.0
    patches, trans = [], []
    for i in range(n):
        for j in range(n):
            patches.append(img[i * P:(i + 1) * P, j * P:(j + 1) * P])
            trans.append((centres[j], centres[i]))
    stored_k = rng.integers(0, 4, n * n) if rotate else np.zeros(n * n, dtype=np.int64)
    patches = np.stack([np.rot90(p, k) for p, k in zip(patches, stored_k)])
    present = np.ones(n * n, dtype=bool)
    n_missing = int(np.floor(missing_fraction * n * n + 0.5))
    if n_missing:
        present[rng.choice(n * n, n_missing, replace=False)] = False
    return PuzzleInstance(n, np.ascontiguousarray(patches), np.array(trans), np.mod(-stored_k, 4).astype(np.int64),
                          present, seed, np.arange(n * n))


def assemble_image(patches, translations, rot_index, n):
    """Paste patches back on the board: cell from translation, raster rotated by ``rot_index``."""
    from .metrics import snap_translation

    P = patches.shape[1]
    out = np.zeros((n * P, n * P, 3), dtype=patches.dtype)
    cells = snap_translation(translations, n)
    for p, (cj, ci), k in zip(patches, cells, rot_index):
        out[ci * P:(ci + 1) * P, cj * P:(cj + 1) * P] = np.rot90(p, int(k))
    return out


def with_missing(inst, missing_fraction, seed):
    """Copy of a puzzle with ``round(missing_fraction * n^2)`` pieces removed at random."""
    rng = np.random.default_rng(seed)
    N = inst.num_pieces
    present = np.ones(N, dtype=bool)
    k = int(np.floor(missing_fraction * N + 0.5))
    if k:
        present[rng.choice(N, k, replace=False)] = False
    return replace(inst, present=present)


# ---------------------------------------------------------------------------
# 3D fragment sets


@dataclass
class FragmentSet:
    fragments: np.ndarray         # (K, 1000, 3) centred clouds (as stored, possibly rotated)
    gt_translations: np.ndarray   # (K, 3) centroids in the object frame
    gt_rotations: np.ndarray      # (K, 4) quaternions restoring each stored fragment
    present: np.ndarray
    shape_kind: str
    planes: np.ndarray            # (K-1, 4) cut planes as (normal, offset)
    source_points: np.ndarray     # (K*1000, 3) object-frame sample set
    seed: int = 0
    perm: np.ndarray = None
    init_translations: np.ndarray = None
    init_rotations: np.ndarray = None

    kind = "frag3d"
    dim = 3

    @property
    def num_pieces(self):
        return len(self.fragments)


def _inside(kind, pts, prm):
    x, y, z = pts.T
    if kind == "box":
        return np.all(np.abs(pts) <= prm["half"], axis=1)
    if kind == "cylinder":
        return (x ** 2 + y ** 2 <= prm["radius"] ** 2) & (np.abs(z) <= prm["height"])
    if kind == "sphere":
        return ((pts / prm["axes"]) ** 2).sum(1) <= 1.0
    box = np.all(np.abs(pts - prm["box_c"]) <= prm["half"], axis=1)
    ball = ((pts - prm["ball_c"]) ** 2).sum(1) <= prm["radius"] ** 2
    return box | ball


def _shape_params(kind, rng):
    if kind == "box":
        return {"half": rng.uniform(0.2, 0.5, 3)}
    if kind == "cylinder":
        return {"radius": rng.uniform(0.2, 0.4), "height": rng.uniform(0.2, 0.5)}
    if kind == "sphere":
        return {"axes": rng.uniform(0.3, 0.5, 3)}
    if kind == "composite":
        return {"half": rng.uniform(0.15, 0.3, 3), "box_c": np.array([-0.15, 0.0, 0.0]),
                "radius": rng.uniform(0.2, 0.3), "ball_c": np.array([0.2, 0.0, 0.0])}
    raise ConfigError(f"unknown shape kind {kind!r}; expected one of {SHAPE_KINDS}")


def _volume_samples(kind, prm, count, rng):
    out = []
    have = 0
    while have < count:
        cand = rng.uniform(-0.6, 0.6, (2 * count, 3))
        cand = cand[_inside(kind, cand, prm)]
        out.append(cand)
        have += len(cand)
    return np.concatenate(out)[:count]


def generate_fragments(shape_kind, num_pieces, seed, max_retries=100):
    """Cut a procedural solid into ``num_pieces`` fragments with random planes."""
    if not 2 <= num_pieces <= 20:
        raise ConfigError("num_pieces must be in [2, 20]")
    rng = np.random.default_rng(seed)
    prm = _shape_params(shape_kind, rng)
    pts = _volume_samples(shape_kind, prm, max(20000, 2000 * num_pieces), rng)
    cells = [np.arange(len(pts))]
    planes = []
    for _ in range(num_pieces - 1):
        big = int(np.argmax([len(c) for c in cells]))
        cell = cells.pop(big)
        cp = pts[cell]
        for _attempt in range(max_retries):
            normal = geo.random_unit_vectors(rng, 1)[0]
            anchor = cp.mean(0) + rng.normal(0, 0.05, 3)
            side = cp @ normal - anchor @ normal > 0
            # a side below 10% of the cell counts as an empty cut
            if min(side.sum(), (~side).sum()) >= max(1, len(cell) // 10):
                break
        else:
            raise ConfigError(f"could not find a valid cut after {max_retries} attempts")
        planes.append(np.concatenate([normal, [anchor @ normal]]))
        cells += [cell[side], cell[~side]]
    frags, cents, source = [], [], []
    for cell in cells:
        pick = rng.choice(cell, NUM_POINTS, replace=len(cell) < NUM_POINTS)
        sample = pts[pick]
        source.append(sample)
        centred, c = center_piece(sample)
        frags.append(centred)
        cents.append(c)
    K = len(frags)
    return FragmentSet(np.stack(frags), np.stack(cents), np.tile([1.0, 0.0, 0.0, 0.0], (K, 1)),
                       np.ones(K, dtype=bool), shape_kind, np.array(planes), np.concatenate(source), seed,
                       np.arange(K))


def posed_union(fs):
    """All fragments moved by their ground-truth poses, concatenated."""
    R = geo.quat_to_matrix(fs.gt_rotations)
    return np.concatenate([f @ r.T + t for f, r, t in zip(fs.fragments, R, fs.gt_translations)])


# ---------------------------------------------------------------------------
# shuffling


def shuffle_instance(task, seed):
    """Permute pieces and draw prior initial poses; 3D fragments also get a random rotation."""
    rng = np.random.default_rng(seed)
    K = task.num_pieces
    perm = rng.permutation(K)
    base_perm = np.arange(K) if task.perm is None else np.asarray(task.perm)
    init_t = rng.standard_normal((K, task.dim))
    if isinstance(task, PuzzleInstance):
        init_r = geo.angle2d_from_theta(rng.uniform(0, 2 * np.pi, K))
        return replace(task, patches=task.patches[perm], gt_translations=task.gt_translations[perm],
                       gt_rot_index=task.gt_rot_index[perm], present=task.present[perm],
                       perm=base_perm[perm], init_translations=init_t, init_rotations=init_r)
    Q = geo.random_rotation(rng, K)
    frags = np.einsum("kpj,kij->kpi", task.fragments[perm], Q)
    gtR = geo.quat_to_matrix(task.gt_rotations[perm]) @ np.swapaxes(Q, -1, -2)
    init_r = geo.matrix_to_quat(geo.random_rotation(rng, K))
    return replace(task, fragments=frags, gt_translations=task.gt_translations[perm],
                   gt_rotations=geo.matrix_to_quat(gtR), present=task.present[perm],
                   perm=base_perm[perm], init_translations=init_t, init_rotations=init_r)


def puzzle_corpus(num_images, sizes=(2, 3, 4), image_size=48, rotate=True, seed=0, portrait_every=3):
    """One puzzle per synthetic image, grid side cycling through ``sizes``."""
    out = []
    for i in range(num_images):
        img = synth_image(image_size, seed * 100003 + i, portrait=(portrait_every and i % portrait_every == 0))
        p = generate_puzzle(img, sizes[i % len(sizes)], rotate=rotate, seed=seed * 100003 + i)
        out.append(shuffle_instance(p, seed * 100003 + i))
    return out


def fragment_corpus(num_objects, pieces=(2, 3, 4), seed=0):
    out = []
    for i in range(num_objects):
        s = seed * 100003 + i
        fs = generate_fragments(SHAPE_KINDS[i % len(SHAPE_KINDS)], pieces[i % len(pieces)], s)
        out.append(shuffle_instance(fs, s))
    return out


# ---------------------------------------------------------------------------
# dataset files: <dir>/manifest.json + <dir>/data.bin


def _tensor_fields(inst):
    out = {}
    for f in fields(inst):
        v = getattr(inst, f.name)
        if isinstance(v, np.ndarray):
            out[f.name] = v
    return out


def _meta_fields(inst):
    return {f.name: getattr(inst, f.name) for f in fields(inst)
            if not isinstance(getattr(inst, f.name), np.ndarray) and getattr(inst, f.name) is not None}


def write_dataset(path, instances):
    os.makedirs(path, exist_ok=True)
    entries = []
    offset = 0
    blob = hashlib.sha256()
    with open(os.path.join(path, "data.bin"), "wb") as fh:
        for inst in instances:
            tensors = []
            for name, arr in _tensor_fields(inst).items():
                a = np.ascontiguousarray(arr)
                a = a.astype(a.dtype.newbyteorder("<"))
                raw = a.tobytes()
                tensors.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset,
                                "nbytes": len(raw), "sha256": hashlib.sha256(raw).hexdigest()})
                fh.write(raw)
                blob.update(raw)
                offset += len(raw)
            meta = {k: (int(v) if isinstance(v, (np.integer,)) else v) for k, v in _meta_fields(inst).items()}
            entries.append({"kind": inst.kind, "meta": meta, "tensors": tensors})
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "count": len(instances),
        "conventions": {
            "byte_order": "little",
            "board": "[-1, 1]^2, cell centres (2i+1)/n - 1, translation = (column, row)",
            "rotation_2d": "quarter turns restoring the stored raster (np.rot90 on H, W)",
            "rotation_3d": "quaternion (w, x, y, z), w >= 0; posed = cloud @ R^T + t",
            "points_per_fragment": NUM_POINTS,
        },
        "blob": "data.bin",
        "blob_bytes": offset,
        "blob_sha256": blob.hexdigest(),
        "entries": entries,
    }
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
    return manifest


def read_dataset(path):
    try:
        with open(os.path.join(path, "manifest.json")) as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"cannot read manifest: {exc}") from exc
    if manifest.get("format") != FORMAT_NAME or manifest.get("version") != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {manifest.get('version')!r}")
    with open(os.path.join(path, manifest["blob"]), "rb") as fh:
        data = fh.read()
    if len(data) != manifest["blob_bytes"]:
        raise DatasetFormatError(f"blob has {len(data)} bytes, expected {manifest['blob_bytes']}", len(data))
    out = []
    for entry in manifest["entries"]:
        arrays = {}
        for t in entry["tensors"]:
            raw = data[t["offset"]:t["offset"] + t["nbytes"]]
            if len(raw) != t["nbytes"]:
                raise DatasetFormatError(f"truncated tensor {t['name']}", t["offset"] + len(raw))
            if hashlib.sha256(raw).hexdigest() != t["sha256"]:
                raise DatasetFormatError(f"checksum mismatch in tensor {t['name']}", t["offset"])
            arrays[t["name"]] = np.frombuffer(raw, dtype=np.dtype(t["dtype"])).reshape(t["shape"]).copy()
        cls = PuzzleInstance if entry["kind"] == "puzzle2d" else FragmentSet
        out.append(cls(**arrays, **entry["meta"]))
    return out
