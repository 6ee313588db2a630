"""Checkpoint container.

Layout::

    b"CASSKIT-CKPT-1\\n"
    uint64 little-endian header length
    header: UTF-8 JSON (specs, step, digests, run state, tensor index)
    blob:   raw little-endian tensor bytes, in index order

Tensors are keyed ``<group>/<parameter name>`` where group is ``a``, ``b``,
``swa/a`` or ``swa/b``. Values round-trip bit-for-bit.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbones import BackboneSpec, DualBackbone, build_backbone, specs_digest
from .errors import CheckpointFormatError, SpecError

MAGIC = b"CASSKIT-CKPT-1\n"
FORMAT = "CASSKIT-CKPT-1"


@dataclass
class Checkpoint:
    specs: dict[str, BackboneSpec]
    params: dict[str, dict[str, np.ndarray]]
    step: int = 0
    config_digest: str = ""
    state: dict = field(default_factory=dict)

    @property
    def spec_digest(self) -> str:
        return specs_digest(self.specs)

    def branch_params(self, branch: str, use_swa: bool = True) -> dict[str, np.ndarray]:
        if use_swa and f"swa/{branch}" in self.params:
            return self.params[f"swa/{branch}"]
        try:
            return self.params[branch]
        except KeyError:
            raise CheckpointFormatError("branch not stored", field=branch) from None


def state_to_numpy(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def checkpoint_from_pair(pair: DualBackbone, step: int = 0, config_digest: str = "",
                         state: dict | None = None, swa: dict | None = None) -> Checkpoint:
    params = {"a": state_to_numpy(pair.branch_a), "b": state_to_numpy(pair.branch_b)}
    for k, v in (swa or {}).items():
        params[f"swa/{k}"] = v
    return Checkpoint({"a": pair.spec_a, "b": pair.spec_b}, params, step, config_digest, dict(state or {}))


def write_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    index, chunks, offset = [], [], 0
    for group in sorted(ckpt.params):
        for name in sorted(ckpt.params[group]):
            arr = np.ascontiguousarray(ckpt.params[group][name])
            raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
            index.append({
                "name": f"{group}/{name}",
                "dtype": arr.dtype.str.lstrip("<>|="),
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            })
            chunks.append(raw)
            offset += len(raw)
    blob = b"".join(chunks)
    header = {
        "format": FORMAT,
        "specs": {k: s.to_dict() for k, s in ckpt.specs.items()},
        "spec_digest": ckpt.spec_digest,
        "step": int(ckpt.step),
        "config_digest": ckpt.config_digest,
        "state": ckpt.state,
        "tensors": index,
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        fh.write(blob)
    return path


def read_checkpoint(path, expected_spec_digest: str | None = None) -> Checkpoint:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointFormatError("bad magic string", field="magic")
    pos = len(MAGIC)
    if len(data) < pos + 8:
        raise CheckpointFormatError("truncated before header length", field="header_length")
    (hlen,) = struct.unpack("<Q", data[pos:pos + 8])
    pos += 8
    if len(data) < pos + hlen:
        raise CheckpointFormatError("truncated header", field="header")
    try:
        header = json.loads(data[pos:pos + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"unparseable JSON ({exc})", field="header") from None
    blob = data[pos + hlen:]

    for key in ("format", "specs", "spec_digest", "step", "tensors", "blob_sha256"):
        if key not in header:
            raise CheckpointFormatError("missing", field=key)
    if header["format"] != FORMAT:
        raise CheckpointFormatError(f"unsupported format {header['format']!r}", field="format")
    try:
        specs = {k: BackboneSpec.from_dict(v) for k, v in header["specs"].items()}
    except TypeError as exc:
        raise CheckpointFormatError(str(exc), field="specs") from None
    if set(specs) not in ({"a", "b"}, {"a"}):
        raise CheckpointFormatError("expected branches 'a' and 'b' (or a lone 'a')", field="specs")
    digest = specs_digest(specs)
    if digest != header["spec_digest"]:
        raise CheckpointFormatError("stored specs do not match stored digest", field="spec_digest")
    if expected_spec_digest is not None and digest != expected_spec_digest:
        raise CheckpointFormatError(
            f"spec digest {digest} does not match expected {expected_spec_digest}", field="spec_digest"
        )
    if hashlib.sha256(blob).hexdigest() != header["blob_sha256"]:
        raise CheckpointFormatError("tensor blob hash mismatch", field="blob_sha256")

    params: dict[str, dict[str, np.ndarray]] = {}
    for entry in header["tensors"]:
        name = entry.get("name", "?")
        try:
            group, pname = name.rsplit("/", 1)
            dtype = np.dtype(entry["dtype"]).newbyteorder("<")
            start, n = int(entry["offset"]), int(entry["nbytes"])
            arr = np.frombuffer(blob[start:start + n], dtype=dtype).reshape(entry["shape"])
        except (KeyError, ValueError, TypeError) as exc:
            raise CheckpointFormatError(f"bad tensor entry ({exc})", field=f"tensors[{name}]") from None
        params.setdefault(group, {})[pname] = arr.astype(dtype.newbyteorder("="), copy=True)
    return Checkpoint(specs, params, int(header["step"]), header.get("config_digest", ""), header.get("state", {}))


def restore_branch(net: torch.nn.Module, params: dict[str, np.ndarray]) -> torch.nn.Module:
    state = {k: torch.from_numpy(np.array(v)) for k, v in params.items()}
    missing = set(net.state_dict()) - set(state)
    if missing:
        raise CheckpointFormatError(f"missing parameters {sorted(missing)[:5]}", field="tensors")
    net.load_state_dict(state, strict=True)
    return net


def save_checkpoint(path, pair: DualBackbone, state: dict | None = None, *, step: int = 0,
                    config_digest: str = "", swa: dict | None = None) -> Path:
    return write_checkpoint(path, checkpoint_from_pair(pair, step, config_digest, state, swa))


def load_checkpoint(path, expected_spec_digest: str | None = None) -> tuple[DualBackbone, Checkpoint]:
    """Rebuild the pair stored in ``path``; raw weights are loaded (not SWA).

    Returns the pair and the full :class:`Checkpoint` (step, state, SWA groups).
    """
    ckpt = read_checkpoint(path, expected_spec_digest)
    if "b" not in ckpt.specs:
        raise CheckpointFormatError("single-branch checkpoint holds no pair", field="specs")
    nets = {}
    for k in ("a", "b"):
        spec = ckpt.specs[k]
        if spec.init_mode == "pretrained":
            # stored weights supersede the original init file
            spec = BackboneSpec(**{**spec.to_dict(), "init_mode": "random", "pretrained_path": None})
        nets[k] = restore_branch(build_backbone(spec, 0), ckpt.params[k])
        nets[k].spec = ckpt.specs[k]
    return DualBackbone(nets["a"], nets["b"], ckpt.specs["a"], ckpt.specs["b"]), ckpt


def load_parameter_file(path, variant: str | None = None, branch: str | None = None) -> dict[str, np.ndarray]:
    """Read an externally provided parameter set.

    Accepts a casskit checkpoint (branch picked by ``branch`` or by matching
    ``variant``; SWA weights preferred), a ``.npz`` archive, or a torch
    ``state_dict`` saved with ``torch.save``.
    """
    path = Path(path)
    if not path.exists():
        raise SpecError(f"pretrained parameter file not found: {path}")
    with open(path, "rb") as fh:
        head = fh.read(len(MAGIC))
    if head == MAGIC:
        ckpt = read_checkpoint(path)
        if branch is None:
            matches = [k for k in ("a", "b") if ckpt.specs[k].variant == variant]
            if not matches:
                raise SpecError(f"checkpoint {path} has no branch of variant {variant!r}")
            branch = matches[0]
        return ckpt.branch_params(branch)
    if path.suffix == ".npz":
        with np.load(path) as z:
            return {k: z[k] for k in z.files}
    state = torch.load(path, map_location="cpu", weights_only=True)
    return {k: v.numpy() for k, v in state.items()}
