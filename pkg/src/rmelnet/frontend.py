"""Tier-1 frontend: text encoder plus a stack of combined time/frequency layers.

Every layer carries three streams over a (frames, bins) grid:

* time-delayed: a GRU over frames for each bin, then a bidirectional GRU
  across the bins of each frame. Its input at frame t holds frames < t only.
* centralized: one GRU over frames on a whole-frame summary.
* frequency: a GRU across bins of one frame, fed by the layer below plus the
  time-delayed and centralized streams. Cell (t, f) sees bins < f of frame t.

The attention layer runs its centralized GRU step by step: the context of
step t-1 is part of the GRU input at t, and the GRU state at t is the query
for step t. Context t then feeds the frequency stream of that layer and the
centralized and frequency streams of every later layer.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .attention import (AttentionConfig, AttentionRecord, MixtureParams, context,
                        step_params, straight_through_scale, weights)


class NonFiniteError(FloatingPointError):
    """Activations went NaN/Inf; carries where it happened."""

    def __init__(self, stage: str, layer: int | None = None, step: int | None = None):
        self.stage, self.layer, self.step = stage, layer, step
        super().__init__(f"non-finite activations in {stage} (layer={layer}, step={step})")


@dataclass
class FrontendConfig:
    n_symbols: int
    n_layers: int = 5
    hidden: int = 256
    embed_dim: int = 128
    M: int = 10
    frames: int = 112
    bins: int = 32
    activation_bits: int = 32
    straight_through: bool = True
    eps_kappa: float = 0.001
    eps_beta: float = 0.01

    def __post_init__(self):
        if self.n_layers < 1 or self.hidden <= 0 or self.embed_dim <= 0:
            raise ValueError("n_layers, hidden and embed_dim must be positive")
        if self.frames < 1 or self.bins < 1:
            raise ValueError("grid shape must be positive")
        if self.activation_bits not in (16, 32):
            raise ValueError("activation_bits must be 16 or 32")

    @property
    def attention_layer(self) -> int:
        """1-based index of the layer hosting attention (the middle one)."""
        return math.ceil(self.n_layers / 2)

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(self.M, self.eps_kappa, self.eps_beta)

    @classmethod
    def desk(cls, n_symbols: int, **overrides) -> "FrontendConfig":
        base = dict(hidden=64, embed_dim=32, M=4)
        base.update(overrides)
        return cls(n_symbols=n_symbols, **base)


class CombinedLayer(nn.Module):
    def __init__(self, hidden: int, memory_dim: int, conditioned: bool):
        super().__init__()
        H = hidden
        self.td_time = nn.GRU(H, H, batch_first=True)
        self.td_freq = nn.GRU(H, H, batch_first=True, bidirectional=True)
        self.td_out = nn.Linear(2 * H, H)
        self.cent = nn.GRU(H, H, batch_first=True)
        self.cent_out = nn.Linear(H, H)
        self.freq = nn.GRU(H, H, batch_first=True)
        self.freq_out = nn.Linear(H, H)
        self.td_to_freq = nn.Linear(H, H)
        self.cent_to_freq = nn.Linear(H, H)
        self.conditioned = conditioned
        if conditioned:
            self.ctx_to_cent = nn.Linear(memory_dim, H)
            self.ctx_to_freq = nn.Linear(memory_dim, H)


class FrontendModel(nn.Module):
    def __init__(self, cfg: FrontendConfig):
        super().__init__()
        self.cfg = cfg
        H, D = cfg.hidden, 2 * cfg.hidden
        self.embed = nn.Embedding(cfg.n_symbols, cfg.embed_dim, padding_idx=0)
        self.encoder = nn.LSTM(cfg.embed_dim, H, batch_first=True, bidirectional=True)
        self.td_in = nn.Linear(1, H)
        self.freq_in = nn.Linear(1, H)
        self.cent_in = nn.Linear(cfg.bins, H)
        self.layers = nn.ModuleList(
            CombinedLayer(H, D, conditioned=i >= cfg.attention_layer)
            for i in range(1, cfg.n_layers + 1))
        self.attn_proj = nn.Linear(H, 3 * cfg.M)
        self.out = nn.Linear(H, 1)

    @property
    def dtype(self) -> torch.dtype:
        return self.out.weight.dtype

    # -- text ---------------------------------------------------------------

    def encode_text(self, ids: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        """Memory (B, U, 2*hidden) from padded ids (B, U)."""
        if ids.dim() == 1:
            ids = ids[None]
        if ids.shape[-1] == 0:
            raise ValueError("cannot encode an empty symbol sequence")
        if lengths is None:
            lengths = torch.full((ids.shape[0],), ids.shape[1], dtype=torch.long)
        emb = self.embed(ids)
        packed = nn.utils.rnn.pack_padded_sequence(emb, lengths.cpu(), batch_first=True, enforce_sorted=False)
        out, _ = self.encoder(packed)
        memory, _ = nn.utils.rnn.pad_packed_sequence(out, batch_first=True, total_length=ids.shape[1])
        return memory

    # -- attention ------------------------------------------------------------

    def attend(self, h: torch.Tensor, prev: MixtureParams, memory: torch.Tensor,
               mem_mask: torch.Tensor) -> tuple[MixtureParams, torch.Tensor, torch.Tensor]:
        """One attention step; returns (params, weights, context)."""
        acfg = self.cfg.attention
        params = step_params(h, self.attn_proj, prev, acfg)
        w = weights(params, memory.shape[1], acfg, out_dtype=torch.float32) * mem_mask
        w = w.to(memory.dtype)
        if self.cfg.straight_through and torch.is_grad_enabled():
            w = straight_through_scale(w, acfg.M)
        return params, w, context(w, memory)

    # -- teacher forcing --------------------------------------------------------

    def forward(self, x: torch.Tensor, ids: torch.Tensor, id_lengths: torch.Tensor | None = None):
        """Predict every cell of ``x`` (B, T, F) from its raster-order past.

        Returns (means (B, T, F), weights (B, T, U), kappa (B, T, M)).
        """
        B, T, F = x.shape
        H = self.cfg.hidden
        x = x.to(self.dtype)
        memory = self.encode_text(ids, id_lengths)
        U = memory.shape[1]
        if id_lengths is None:
            mem_mask = torch.ones(B, U)
        else:
            mem_mask = (torch.arange(U)[None] < id_lengths[:, None]).float()

        prev_frame = torch.cat([x.new_zeros(B, 1, F), x[:, :-1]], dim=1)
        prev_bin = torch.cat([x.new_zeros(B, T, 1), x[:, :, :-1]], dim=2)
        td = self.td_in(prev_frame[..., None])
        fr = self.freq_in(prev_bin[..., None])
        cent = self.cent_in(prev_frame)
        ctx = None
        record = None

        for li, layer in enumerate(self.layers, 1):
            s = td.transpose(1, 2).reshape(B * F, T, H)
            s, _ = layer.td_time(s)
            s = s.reshape(B, F, T, H).transpose(1, 2).reshape(B * T, F, H)
            s, _ = layer.td_freq(s)
            td = td + layer.td_out(s).reshape(B, T, F, H)

            if li == self.cfg.attention_layer:
                cent, ctx, record = self._attention_layer(layer, cent, memory, mem_mask)
            else:
                inp = cent if ctx is None else cent + layer.ctx_to_cent(ctx)
                h, _ = layer.cent(inp)
                cent = cent + layer.cent_out(h)

            z = fr + layer.td_to_freq(td) + layer.cent_to_freq(cent)[:, :, None]
            if ctx is not None:
                z = z + layer.ctx_to_freq(ctx)[:, :, None]
            h, _ = layer.freq(z.reshape(B * T, F, H))
            fr = fr + layer.freq_out(h).reshape(B, T, F, H)
            for name, t in (("time-delayed", td), ("centralized", cent), ("frequency", fr)):
                if not torch.isfinite(t).all():
                    bad = (~torch.isfinite(t)).reshape(B, T, -1).any(-1).any(0).nonzero()
                    raise NonFiniteError(name, li, int(bad[0]))

        means = self.out(fr).squeeze(-1)
        return means, record[0], record[1]

    def _attention_layer(self, layer: CombinedLayer, cent_in: torch.Tensor, memory: torch.Tensor,
                         mem_mask: torch.Tensor):
        B, T, H = cent_in.shape
        params = MixtureParams.initial(B, self.cfg.M)
        ctx = memory.new_zeros(B, memory.shape[-1])
        h = None
        hs, ctxs, ws, ks = [], [], [], []
        for t in range(T):
            o, h = layer.cent((cent_in[:, t] + layer.ctx_to_cent(ctx))[:, None], h)
            q = o[:, 0]
            try:
                params, w, ctx = self.attend(q, params, memory, mem_mask)
            except FloatingPointError:
                raise NonFiniteError("attention", self.cfg.attention_layer, t) from None
            hs.append(q)
            ctxs.append(ctx)
            ws.append(w)
            ks.append(params.kappa)
        cent = cent_in + layer.cent_out(torch.stack(hs, 1))
        return cent, torch.stack(ctxs, 1), (torch.stack(ws, 1), torch.stack(ks, 1))


def forward_teacher_forced(model: FrontendModel, x, ids, id_lengths=None):
    """Means per cell plus one AttentionRecord per batch item."""
    means, w, kappa = model(x, ids, id_lengths)
    records = []
    for b in range(w.shape[0]):
        U = w.shape[2] if id_lengths is None else int(id_lengths[b])
        records.append(AttentionRecord(w[b, :, :U].detach().float(), kappa[b].detach()))
    return means, records


def mse_loss(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean squared error over the cells where ``mask`` is set (all cells by default)."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    dtype = torch.promote_types(torch.promote_types(pred.dtype, target.dtype), torch.float32)
    diff = (pred.to(dtype) - target.to(dtype)) ** 2
    if mask is None:
        return diff.mean()
    mask = mask.to(diff.dtype).expand_as(diff)
    n = mask.sum()
    if n == 0:
        raise ValueError("loss mask selects no cells")
    return (diff * mask).sum() / n


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# --- checkpoints -----------------------------------------------------------------

CKPT_MAGIC = b"RMCK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def write_checkpoint(path, model: FrontendModel, meta: dict | None = None,
                     extra: dict[str, torch.Tensor] | None = None) -> None:
    """Serialize config, free-form metadata and named 32-bit tensors.

    Layout: magic, u32 version, u32 json length, json, u32 blob count, then per
    blob u16 name length, name, u8 ndim, u32 dims, little-endian f32 data.
    """
    header = {"config": asdict(model.cfg), "meta": meta or {}}
    blobs = {k: v for k, v in model.state_dict().items()}
    blobs.update({k: v for k, v in (extra or {}).items()})
    hjson = json.dumps(header, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(hjson)), hjson, struct.pack("<I", len(blobs))]
    for name, t in blobs.items():
        arr = t.detach().cpu().float().numpy().astype("<f4")
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def read_checkpoint(path) -> tuple[dict, dict[str, torch.Tensor]]:
    data = Path(path).read_bytes()
    try:
        return _parse_checkpoint(path, data)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({exc})") from None


def _parse_checkpoint(path, data: bytes):
    if data[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}, expected b'RMCK'")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 12
    header = json.loads(data[pos:pos + hlen])
    pos += hlen
    (n,) = struct.unpack_from("<I", data, pos)
    pos += 4
    blobs = {}
    for _ in range(n):
        (nl,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + nl].decode()
        pos += nl
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        if pos + 4 * count > len(data):
            raise CheckpointError(f"{path}: blob {name!r} runs past the end of the file")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape)
        pos += 4 * count
        blobs[name] = torch.from_numpy(arr.copy())
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return header, blobs


def load_model(path) -> tuple[FrontendModel, dict, dict[str, torch.Tensor]]:
    """Rebuild the model; returns (model, header, remaining non-model blobs)."""
    header, blobs = read_checkpoint(path)
    model = FrontendModel(FrontendConfig(**header["config"]))
    state = model.state_dict()
    model.load_state_dict({k: blobs.pop(k).to(state[k].dtype) for k in state})
    return model, header, blobs
