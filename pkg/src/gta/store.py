"""On-disk formats: GTEN tensor files, dataset directories and checkpoints.

GTEN layout (all little-endian)::

    b"GTEN" | u16 version | u8 dtype (1 = f32) | u8 rank | u32 dims[rank]
    | f32 payload, row-major | u32 CRC32(header + payload)

Writers go through a temp file, fsync, then rename, so a reader never sees a
half-written file under the final name.
"""

import hashlib
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .errors import (
    ArchMismatch,
    BadMagic,
    ChecksumError,
    IoError,
    UnsupportedVersion,
)

MAGIC = b"GTEN"
VERSION = 1
DTYPE_F32 = 1
_HEAD = struct.Struct("<4sHBB")


def encode_tensor(tensor):
    arr = np.require(np.asarray(tensor, dtype="<f4"), requirements="C")
    if arr.ndim > 255:
        raise ValueError("rank must fit in a byte")
    header = _HEAD.pack(MAGIC, VERSION, DTYPE_F32, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    body = header + arr.tobytes(order="C")
    return body + struct.pack("<I", zlib.crc32(body))


def decode_tensor(blob):
    if len(blob) < _HEAD.size:
        raise IoError("file too short for a GTEN header")
    magic, version, dtype, rank = _HEAD.unpack_from(blob, 0)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersion(f"GTEN version {version} is not supported")
    if dtype != DTYPE_F32:
        raise UnsupportedVersion(f"dtype code {dtype} is not supported")
    dims_end = _HEAD.size + 4 * rank
    if len(blob) < dims_end:
        raise IoError("file truncated inside the dimension table")
    dims = struct.unpack_from(f"<{rank}I", blob, _HEAD.size)
    n_bytes = 4 * int(np.prod(dims, dtype=np.int64))
    if len(blob) != dims_end + n_bytes + 4:
        raise IoError(f"expected {dims_end + n_bytes + 4} bytes, file has {len(blob)}")
    (crc,) = struct.unpack_from("<I", blob, dims_end + n_bytes)
    if zlib.crc32(blob[: dims_end + n_bytes]) != crc:
        raise ChecksumError("CRC32 mismatch")
    data = np.frombuffer(blob, dtype="<f4", count=n_bytes // 4, offset=dims_end)
    return data.reshape(dims).astype(np.float32)


def atomic_write_bytes(path, data):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as f:
                f.write(data)
                f.flush()
                os.fsync(f.fileno())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


def _read_bytes(path):
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e


def write_tensor(path, tensor):
    atomic_write_bytes(path, encode_tensor(tensor))


def read_tensor(path):
    return decode_tensor(_read_bytes(path))


def file_digest(path):
    return hashlib.sha256(_read_bytes(path)).hexdigest()


# ----------------------------------------------------------------------------
# key=value text
# ----------------------------------------------------------------------------


def format_kv(items):
    return "".join(f"{k}={v}\n" for k, v in items)


def parse_kv(text):
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


# ----------------------------------------------------------------------------
# datasets
# ----------------------------------------------------------------------------

MANIFEST = "manifest.txt"
SCHEMA_VERSION = 1


def write_dataset(root, samples, cfg):
    """Persist scene samples; returns the manifest as a dict.

    Layout: ``scene_<id>/trajectory.gten`` (N x 3 x 4 poses),
    ``scene_<id>/view_<k>.rgb.gten``, ``scene_<id>/view_<k>.depth.gten`` and a
    top-level ``manifest.txt``.  Scene records in the manifest are
    ``scene.<id>.<field>=value`` lines; every file carries a sha256 digest.
    """
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoError(f"cannot create {root}: {e}") from e
    lines = [("schema", SCHEMA_VERSION)]
    for key in ("scenes", "views", "resolution", "seed", "complexity", "fov"):
        lines.append((f"config.{key}", getattr(cfg, key)))
    lines.append(("config.kinds", ",".join(cfg.kinds)))
    for s in samples:
        sid = f"{s.scene_id:04d}"
        d = root / f"scene_{sid}"
        traj_rel = f"scene_{sid}/trajectory.gten"
        write_tensor(root / traj_rel, s.trajectory.as_array())
        pre = f"scene.{sid}"
        intr = s.trajectory.intrinsics
        lines += [
            (f"{pre}.seed", s.seed),
            (f"{pre}.kind", s.trajectory.meta.get("kind", "")),
            (f"{pre}.intrinsics", ",".join(repr(float(x)) for x in intr.as_array())),
            (f"{pre}.trajectory", traj_rel),
            (f"{pre}.trajectory.sha256", file_digest(root / traj_rel)),
            (f"{pre}.views", len(s.views)),
        ]
        for k, view in enumerate(s.views):
            for kind, arr in (("rgb", view.rgb), ("depth", view.depth)):
                rel = f"scene_{sid}/view_{k}.{kind}.gten"
                write_tensor(d / f"view_{k}.{kind}.gten", arr)
                lines.append((f"{pre}.view.{k}.{kind}", rel))
                lines.append((f"{pre}.view.{k}.{kind}.sha256", file_digest(root / rel)))
    atomic_write_bytes(root / MANIFEST, format_kv(lines).encode())
    return dict((k, str(v)) for k, v in lines)


def read_manifest(root):
    return parse_kv(_read_bytes(Path(root) / MANIFEST).decode())


def load_dataset(root, verify=True):
    """Load every scene sample listed in ``root/manifest.txt``, verifying digests."""
    from .camera import Intrinsics, Trajectory
    from .scene import RenderedView, SceneSample

    root = Path(root)
    man = read_manifest(root)
    if int(man.get("schema", -1)) != SCHEMA_VERSION:
        raise UnsupportedVersion(f"dataset schema {man.get('schema')!r}")
    ids = sorted({k.split(".")[1] for k in man if k.startswith("scene.")})

    def load(rel):
        path = root / man[rel]
        if verify and file_digest(path) != man[rel + ".sha256"]:
            raise ChecksumError(f"digest mismatch for {man[rel]}")
        return read_tensor(path)

    samples = []
    for sid in ids:
        pre = f"scene.{sid}"
        intr = Intrinsics.from_array([float(x) for x in man[f"{pre}.intrinsics"].split(",")])
        traj = Trajectory.from_array(
            load(f"{pre}.trajectory"), intr, {"kind": man[f"{pre}.kind"]}
        )
        views = []
        for k in range(int(man[f"{pre}.views"])):
            rgb = load(f"{pre}.view.{k}.rgb")
            depth = load(f"{pre}.view.{k}.depth")
            views.append(RenderedView(rgb, depth, traj.poses[k], intr))
        samples.append(SceneSample(int(sid), int(man[f"{pre}.seed"]), traj, views))
    return samples


# ----------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------

CHECKPOINT_INDEX = "checkpoint.txt"


def save_checkpoint(path, models, meta=None):
    """Write ``models`` (a GtaModels) into directory ``path``.

    Each parameter tensor becomes ``<component>.<name>.gten``; ``checkpoint.txt``
    records architecture configs, their hashes, the schedule and a sha256 per tensor.
    """
    path = Path(path)
    lines = [("format", "gta-checkpoint"), ("version", 1)]
    lines += [("patch", models.patch), ("schedule.kind", models.schedule.kind)]
    lines += [("schedule.steps", models.schedule.steps)]
    for k, v in sorted((meta or {}).items()):
        lines.append((f"meta.{k}", v))
    for name, net in models.components():
        lines.append((f"{name}.arch", net.arch_string()))
        lines.append((f"{name}.arch_hash", net.arch_hash()))
        for pname, tensor in net.state_dict().items():
            fname = f"{name}.{pname}.gten"
            write_tensor(path / fname, tensor.detach().cpu().numpy())
            lines.append((f"{name}.param.{pname}", fname))
            lines.append((f"{name}.param.{pname}.sha256", file_digest(path / fname)))
    atomic_write_bytes(path / CHECKPOINT_INDEX, format_kv(lines).encode())


def load_checkpoint(path, expected_arch=None):
    """Rebuild GtaModels from ``path``.

    ``expected_arch`` optionally maps component name to the architecture hash
    the caller requires; any disagreement, or a stored hash that does not
    match the stored architecture, raises ArchMismatch.
    """
    import torch

    from .diffusion import make_schedule
    from .pipeline import GtaModels, network_from_arch

    path = Path(path)
    idx = parse_kv(_read_bytes(path / CHECKPOINT_INDEX).decode())
    if idx.get("format") != "gta-checkpoint":
        raise BadMagic(f"{path} is not a checkpoint")
    if int(idx.get("version", -1)) != 1:
        raise UnsupportedVersion(f"checkpoint version {idx.get('version')!r}")
    nets = {}
    for name in ("geometry", "appearance", "joint"):
        if f"{name}.arch" not in idx:
            continue
        net = network_from_arch(idx[f"{name}.arch"])
        if net.arch_hash() != idx[f"{name}.arch_hash"]:
            raise ArchMismatch(f"{name}: stored hash does not match stored architecture")
        if expected_arch and name in expected_arch and expected_arch[name] != net.arch_hash():
            raise ArchMismatch(f"{name}: architecture hash differs from the expected one")
        state = {}
        for pname in net.state_dict():
            key = f"{name}.param.{pname}"
            if key not in idx:
                raise ArchMismatch(f"{name}: missing parameter {pname}")
            fpath = path / idx[key]
            if file_digest(fpath) != idx[key + ".sha256"]:
                raise ChecksumError(f"digest mismatch for {idx[key]}")
            state[pname] = torch.from_numpy(read_tensor(fpath))
        net.load_state_dict(state)
        net.eval()
        nets[name] = net
    meta = {k[5:]: v for k, v in idx.items() if k.startswith("meta.")}
    schedule = make_schedule(idx["schedule.kind"], int(idx["schedule.steps"]))
    return GtaModels(
        geometry=nets.get("geometry"),
        appearance=nets.get("appearance"),
        joint=nets.get("joint"),
        schedule=schedule,
        patch=int(idx["patch"]),
        meta=meta,
    )
