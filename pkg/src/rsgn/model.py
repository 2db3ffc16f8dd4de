"""Generator + reconstructor bundle and its checkpoint file.

Checkpoint layout: b"RSGNCKPT", u32 little-endian header length, a UTF-8
JSON header, then every parameter as raw little-endian float64 in the order
the header lists them.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .diffcore import Tensor
from .generator import GeneratorConfig, GeneratorOutput, GeneratorParams, forward, init_generator, param_shapes
from .reconstructor import ReconstructorParams, init_reconstructor, reconstructor_shapes

CKPT_MAGIC = b"RSGNCKPT"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class RSGN:
    config: GeneratorConfig
    generator: GeneratorParams
    reconstructor: ReconstructorParams

    @classmethod
    def create(cls, config: GeneratorConfig, seed: int = 0) -> "RSGN":
        ss = np.random.SeedSequence(seed)
        g_seed, r_seed = ss.spawn(2)
        return cls(config, init_generator(config, np.random.default_rng(g_seed)),
                   init_reconstructor(config, np.random.default_rng(r_seed)))

    def named(self) -> list[tuple[str, Tensor]]:
        return ([("generator." + k, t) for k, t in self.generator.named()]
                + [("reconstructor." + k, t) for k, t in self.reconstructor.named()])

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named()]

    def zero_grad(self) -> None:
        for t in self.tensors():
            t.zero_grad()

    def copy(self) -> "RSGN":
        return RSGN(GeneratorConfig(**asdict(self.config)), self.generator.copy(), self.reconstructor.copy())

    def forward(self, features, spans) -> GeneratorOutput:
        return forward(features, spans, self.generator, self.config)

    def predict(self, features, spans) -> np.ndarray:
        """Per-shot key-shot probabilities (no tape)."""
        return self.forward(features, spans).probs


def save_checkpoint(model: RSGN, path) -> None:
    path = Path(path)
    named = model.named()
    header = {
        "format_version": CKPT_VERSION,
        "config": asdict(model.config),
        "blocks": [{"name": k, "shape": list(t.shape)} for k, t in named],
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        for _, t in named:
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> RSGN:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc.strerror})") from exc
    if blob[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {blob[:8]!r})")
    if len(blob) < 12:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<I", blob[8:12])
    try:
        header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from exc
    if header.get("format_version") != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    try:
        cfg = GeneratorConfig(**header["config"])
        blocks = [(b["name"], tuple(b["shape"])) for b in header["blocks"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed header ({exc})") from exc
    expected = {"generator." + k: v for k, v in param_shapes(cfg).items()}
    expected.update({"reconstructor." + k: v for k, v in reconstructor_shapes(cfg).items()})
    offset = 12 + hlen
    values = {}
    for name, shape in blocks:
        if expected.get(name) != shape:
            raise CheckpointError(f"{path}: block {name} has shape {shape}, config implies {expected.get(name)}")
        nbytes = 8 * int(np.prod(shape))
        if offset + nbytes > len(blob):
            raise CheckpointError(f"{path}: truncated parameter block {name}")
        values[name] = np.frombuffer(blob, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape).astype(np.float64)
        offset += nbytes
    missing = set(expected) - set(values)
    if missing:
        raise CheckpointError(f"{path}: missing parameter blocks {sorted(missing)}")
    gen = GeneratorParams(**{k.split(".", 1)[1]: Tensor(v, requires_grad=True, name=k.split(".", 1)[1])
                             for k, v in values.items() if k.startswith("generator.")})
    rec = ReconstructorParams(**{k.split(".", 1)[1]: Tensor(v, requires_grad=True, name=k.split(".", 1)[1] + "_prime")
                                 for k, v in values.items() if k.startswith("reconstructor.")})
    return RSGN(cfg, gen, rec)
