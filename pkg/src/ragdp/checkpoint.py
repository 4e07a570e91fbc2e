"""Binary containers: RPDN network checkpoints and RPTJ trajectory dumps.

RPDN layout (little-endian)::

    "RPDN" u16 version u8 role u32 key_timestep u32 n_layers
    n_layers x (u32 in, u32 out, u8 activation)
    f64[parameter_count]                    canonical flattening order
    then tagged sections: 4-byte tag, u64 length, payload
        DNSR  denoiser conditioning metadata + class embeddings
        ADAM  optimizer state
        PROV  JSON map of input-artifact name -> sha256 hex
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffusion import Denoiser, Trajectory
from .nn import ACTIVATIONS, AdamState, DenseNet, Layer

MAGIC = b"RPDN"
VERSION = 1
ROLES = ("generic", "denoiser", "extractor")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: DenseNet | Denoiser
    role: str = "generic"
    key_timestep: int = 0
    adam: AdamState | None = None
    provenance: dict[str, str] = field(default_factory=dict)


def _section(tag: bytes, payload: bytes) -> bytes:
    return tag + struct.pack("<Q", len(payload)) + payload


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    model = ckpt.model
    net = model.net if isinstance(model, Denoiser) else model
    buf = io.BytesIO()
    buf.write(struct.pack("<4sHBII", MAGIC, VERSION, ROLES.index(ckpt.role),
                          ckpt.key_timestep, len(net.layers)))
    for l in net.layers:
        buf.write(struct.pack("<IIB", l.in_dim, l.out_dim, ACTIVATIONS.index(l.activation)))
    buf.write(net.get_params().astype("<f8").tobytes())
    if isinstance(model, Denoiser):
        meta = struct.pack("<IIIII", model.data_dim, model.T, model.temb_dim,
                           model.n_classes, model.class_dim)
        buf.write(_section(b"DNSR", meta + model.class_emb.astype("<f8").tobytes()))
    if ckpt.adam is not None:
        a = ckpt.adam
        payload = struct.pack("<Qdddd", a.step_count, a.learning_rate, a.beta1, a.beta2, a.epsilon)
        payload += a.first_moment.astype("<f8").tobytes() + a.second_moment.astype("<f8").tobytes()
        buf.write(_section(b"ADAM", payload))
    if ckpt.provenance:
        buf.write(_section(b"PROV", json.dumps(ckpt.provenance, sort_keys=True).encode()))
    return buf.getvalue()


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    head = struct.Struct("<4sHBII")
    magic, version, role, key_t, n_layers = head.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError("not an RPDN checkpoint")
    if version != VERSION:
        raise CheckpointError(f"unsupported RPDN version {version}")
    pos = head.size
    shapes = []
    for _ in range(n_layers):
        n_in, n_out, act = struct.unpack_from("<IIB", data, pos)
        shapes.append((n_in, n_out, ACTIVATIONS[act]))
        pos += 9
    layers = []
    for n_in, n_out, act in shapes:
        w = np.frombuffer(data, "<f8", n_in * n_out, pos).reshape(n_out, n_in).copy()
        pos += 8 * n_in * n_out
        b = np.frombuffer(data, "<f8", n_out, pos).copy()
        pos += 8 * n_out
        layers.append(Layer(w, b, act))
    model: DenseNet | Denoiser = DenseNet(layers)
    adam, prov = None, {}
    while pos < len(data):
        tag = data[pos : pos + 4]
        (length,) = struct.unpack_from("<Q", data, pos + 4)
        payload = data[pos + 12 : pos + 12 + length]
        if len(payload) != length:
            raise CheckpointError(f"truncated {tag!r} section")
        pos += 12 + length
        if tag == b"DNSR":
            d, T, temb, n_cls, cdim = struct.unpack_from("<IIIII", payload)
            emb = np.frombuffer(payload, "<f8", offset=20).copy()
            emb = emb.reshape(n_cls + 1, cdim) if n_cls else None
            model = Denoiser(model, d, T, temb, n_cls, cdim, emb)
        elif tag == b"ADAM":
            step, lr, b1, b2, eps = struct.unpack_from("<Qdddd", payload)
            moments = np.frombuffer(payload, "<f8", offset=40).copy()
            half = len(moments) // 2
            adam = AdamState(moments[:half], moments[half:], step, lr, b1, b2, eps)
        elif tag == b"PROV":
            prov = json.loads(payload)
        else:
            raise CheckpointError(f"unknown section tag {tag!r}")
    return Checkpoint(model, ROLES[role], key_t, adam, prov)


def save_checkpoint(ckpt: Checkpoint, path) -> str:
    data = checkpoint_bytes(ckpt)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path, role: str | None = None, key_timestep: int | None = None) -> Checkpoint:
    ckpt = checkpoint_from_bytes(Path(path).read_bytes())
    if role is not None and ckpt.role != role:
        raise CheckpointError(f"{path}: expected a {role} checkpoint, found {ckpt.role}")
    if key_timestep is not None and ckpt.key_timestep != key_timestep:
        raise CheckpointError(
            f"{path}: extractor trained for k={ckpt.key_timestep}, asked for k={key_timestep}"
        )
    return ckpt


TRAJ_MAGIC = b"RPTJ"


def trajectory_bytes(traj: Trajectory) -> bytes:
    """One record per (timestep, row); batched trajectories are row-major per step."""
    lat = [np.atleast_2d(x) for x in traj.latents]
    dim = lat[0].shape[1]
    recs = [(t, row) for t, x in zip(traj.timesteps, lat) for row in x]
    out = [struct.pack("<4sII", TRAJ_MAGIC, dim, len(recs))]
    for t, row in recs:
        out.append(struct.pack("<I", t) + row.astype("<f8").tobytes())
    return b"".join(out)


def trajectory_records(data: bytes) -> list[tuple[int, np.ndarray]]:
    magic, dim, count = struct.unpack_from("<4sII", data)
    if magic != TRAJ_MAGIC:
        raise ValueError("not an RPTJ file")
    pos, recs = 12, []
    for _ in range(count):
        (t,) = struct.unpack_from("<I", data, pos)
        recs.append((t, np.frombuffer(data, "<f8", dim, pos + 4).copy()))
        pos += 4 + 8 * dim
    return recs
