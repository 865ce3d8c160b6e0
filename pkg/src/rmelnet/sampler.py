"""Autoregressive generation with frame-level memoization and multi-sample noise.

Generation walks the grid in raster order. The time-delayed and centralized
stacks (and attention) depend only on completed frames, so they run once per
frame and their outputs are cached; the frequency stack then runs once per
bin against that cache.

At every cell the Q noisy variants each predict a mean, the means are
averaged into the committed value, and each variant receives a fresh
truncated-Gaussian sample around that average as its next input. The noise
scale is drawn uniformly from [0, R] once per cell and shared by all
variants. Variants are stacked along the batch dimension.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .attention import AttentionRecord, MixtureParams
from .features import MelGrid, NormStats
from .frontend import FrontendModel, NonFiniteError
from .numerics import sample_truncated_gaussians

MAX_NOISE_RANGE = 0.75
TRUNCATION_MARGIN = 1.0


@dataclass
class SamplerConfig:
    Q: int = 100
    R: float = 0.33
    max_frames: int = 112
    termination_patience: int = 3
    seed: int = 0
    parallel: bool = True

    def __post_init__(self):
        if self.Q < 1:
            raise ValueError(f"Q must be >= 1, got {self.Q}")
        if not 0.0 <= self.R <= MAX_NOISE_RANGE:
            raise ValueError(f"R must lie in [0, {MAX_NOISE_RANGE}], got {self.R}")
        if self.max_frames < 0 or self.termination_patience < 1:
            raise ValueError("max_frames must be >= 0 and termination_patience >= 1")


@dataclass
class CacheCounters:
    frame_evals: int = 0    # time-delayed + centralized (+ attention) passes
    bin_evals: int = 0      # frequency-stack passes
    state_lookups: int = 0
    state_hits: int = 0

    @property
    def hit_rate(self) -> float:
        return self.state_hits / self.state_lookups if self.state_lookups else 0.0


@dataclass
class StackCache:
    """Per-layer recurrent state plus the frequency-stack inputs of the current frame."""

    td_h: list
    cent_h: list
    freq_h: list
    freq_bias: list
    frame: int = -1
    counters: CacheCounters = field(default_factory=CacheCounters)


@dataclass
class DecodeState:
    memory: torch.Tensor        # (Q, U, D)
    mem_mask: torch.Tensor      # (Q, U)
    params: MixtureParams
    ctx: torch.Tensor           # (Q, D)
    prev_frame: torch.Tensor    # (Q, F) inputs of the last completed frame
    cur_frame: torch.Tensor     # (Q, F) inputs committed so far in this frame
    cache: StackCache
    ids: list = field(default_factory=list)
    t: int = 0
    attn_w: torch.Tensor | None = None   # weights of the current frame, (Q, U)

    @property
    def batch(self) -> int:
        return self.memory.shape[0]

    @property
    def U(self) -> int:
        return self.memory.shape[1]


@dataclass
class SampleResult:
    grid: MelGrid
    attention: AttentionRecord
    seed: int
    steps: int
    terminated_by: str
    counters: CacheCounters | None = None
    inputs: np.ndarray | None = None     # (T, F, Q) noisy inputs fed back to the model

    def __post_init__(self):
        if self.grid.frames != self.attention.steps:
            raise ValueError("grid frame count differs from attention row count")


# --- state -------------------------------------------------------------------------

def init_state(model: FrontendModel, ids: Sequence[int], batch: int = 1) -> DecodeState:
    cfg = model.cfg
    ids = torch.as_tensor(np.asarray(ids, dtype=np.int64))
    with torch.no_grad():
        memory = model.encode_text(ids[None]).expand(batch, -1, -1).contiguous()
    L, dtype = cfg.n_layers, model.dtype
    cache = StackCache([None] * L, [None] * L, [None] * L, [None] * L)
    return DecodeState(
        memory=memory, mem_mask=torch.ones(batch, memory.shape[1]),
        params=MixtureParams.initial(batch, cfg.M), ctx=memory.new_zeros(batch, memory.shape[2]),
        prev_frame=torch.zeros(batch, cfg.bins, dtype=dtype),
        cur_frame=torch.zeros(batch, cfg.bins, dtype=dtype), cache=cache, ids=[int(i) for i in ids])


@torch.no_grad()
def refresh_frame(model: FrontendModel, state: DecodeState) -> None:
    """Run the frame-level stacks for frame ``state.t`` and cache their outputs."""
    cfg, cache = model.cfg, state.cache
    Q, F, H = state.batch, cfg.bins, cfg.hidden
    if cache.frame == state.t:
        raise AssertionError(f"frame {state.t} refreshed twice")
    cache.counters.state_lookups += 1
    if cache.frame == state.t - 1 and state.t > 0:
        cache.counters.state_hits += 1

    x = state.prev_frame
    td = model.td_in(x[..., None])                # (Q, F, H)
    cent = model.cent_in(x)                       # (Q, H)
    ctx = None
    outputs = []
    for i, layer in enumerate(model.layers):
        li = i + 1
        o, cache.td_h[i] = layer.td_time(td.reshape(Q * F, 1, H), cache.td_h[i])
        o, _ = layer.td_freq(o.reshape(Q, F, H))
        td = td + layer.td_out(o)

        if li == cfg.attention_layer:
            inp = cent + layer.ctx_to_cent(state.ctx)
            o, cache.cent_h[i] = layer.cent(inp[:, None], cache.cent_h[i])
            try:
                state.params, w, state.ctx = model.attend(o[:, 0], state.params, state.memory, state.mem_mask)
            except FloatingPointError:
                raise NonFiniteError("attention", li, state.t) from None
            state.attn_w = w
            ctx = state.ctx
            cent = cent + layer.cent_out(o[:, 0])
        else:
            inp = cent if ctx is None else cent + layer.ctx_to_cent(ctx)
            o, cache.cent_h[i] = layer.cent(inp[:, None], cache.cent_h[i])
            cent = cent + layer.cent_out(o[:, 0])

        bias = layer.td_to_freq(td) + layer.cent_to_freq(cent)[:, None]
        if ctx is not None:
            bias = bias + layer.ctx_to_freq(ctx)[:, None]
        cache.freq_bias[i] = bias
        cache.freq_h[i] = None
        outputs.append((td, cent))
    # residual sums carry any non-finite value to the top, so one check suffices;
    # the offending layer is located only on failure
    if not (torch.isfinite(td).all() and torch.isfinite(cent).all()):
        li = next(i for i, (a, b) in enumerate(outputs, 1)
                  if not (torch.isfinite(a).all() and torch.isfinite(b).all()))
        raise NonFiniteError("frame stacks", li, state.t)
    cache.frame = state.t
    cache.counters.frame_evals += 1


@torch.no_grad()
def step_with_cache(model: FrontendModel, state: DecodeState, f: int) -> torch.Tensor:
    """Mean prediction (Q,) for cell (state.t, f) using the cached frame stacks."""
    cache = state.cache
    assert cache.frame == state.t, f"cache holds frame {cache.frame}, decoding frame {state.t}"
    prev = state.cur_frame[:, f - 1] if f > 0 else state.cur_frame.new_zeros(state.batch)
    fr = model.freq_in(prev[:, None])
    for i, layer in enumerate(model.layers):
        z = fr + cache.freq_bias[i][:, f]
        o, cache.freq_h[i] = layer.freq(z[:, None], cache.freq_h[i])
        fr = fr + layer.freq_out(o[:, 0])
    cache.counters.bin_evals += 1
    mean = model.out(fr)[:, 0]
    if not torch.isfinite(mean).all():
        raise NonFiniteError("frequency stack", None, state.t)
    return mean


def commit(state: DecodeState, f: int, values) -> None:
    state.cur_frame[:, f] = torch.as_tensor(values, dtype=state.cur_frame.dtype)


def end_frame(state: DecodeState) -> None:
    state.prev_frame = state.cur_frame
    state.cur_frame = torch.zeros_like(state.prev_frame)
    state.t += 1


# --- priming -----------------------------------------------------------------------

def prime(model: FrontendModel, prime_grid: MelGrid | None, prime_ids: Sequence[int],
          state: DecodeState) -> DecodeState:
    """Teacher-force a prefix of audio frames and text before free generation.

    The memory is rebuilt from ``prime_ids`` followed by the state's ids; every prime frame
    then advances the frame-level stacks and attention with the given values.
    Only frame-level state crosses frame boundaries, so the frequency stack
    is not run over the prime.
    """
    frames = 0 if prime_grid is None else prime_grid.frames
    if frames == 0 and not len(prime_ids):
        return state
    if state.t != 0:
        raise ValueError("priming must happen before generation starts")
    if prime_grid is not None:
        if not prime_grid.normalized:
            raise ValueError("prime grid must be normalized with the corpus statistics")
        if prime_grid.bins != model.cfg.bins:
            raise ValueError(f"prime grid has {prime_grid.bins} bins, model expects {model.cfg.bins}")
    fresh = init_state(model, list(prime_ids) + state.ids, state.batch)
    values = torch.from_numpy(np.ascontiguousarray(prime_grid.values)) if frames else None
    for t in range(frames):
        refresh_frame(model, fresh)
        fresh.cur_frame = values[t].to(fresh.cur_frame.dtype).expand(fresh.batch, -1).clone()
        end_frame(fresh)
    return fresh


# --- generation ------------------------------------------------------------------

def truncation_bounds(stats: NormStats) -> tuple[float, float]:
    return stats.data_min - TRUNCATION_MARGIN, stats.data_max + TRUNCATION_MARGIN


def generate(model: FrontendModel, ids: Sequence[int], cfg: SamplerConfig, stats: NormStats,
             prime_with: tuple[MelGrid, Sequence[int]] | None = None) -> SampleResult:
    """Sample one tier1 grid for ``ids`` under the multi-sample noise scheme."""
    F = model.cfg.bins
    if stats.n_mels != F:
        raise ValueError(f"stats cover {stats.n_mels} bins, model expects {F}")
    lo, hi = truncation_bounds(stats)
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.Q + 1)
    sigma_rng = np.random.default_rng(seeds[0])
    variant_rngs = [np.random.default_rng(s) for s in seeds[1:]]

    lanes_n = 1 if cfg.parallel else cfg.Q
    per_lane = cfg.Q if cfg.parallel else 1
    lanes = []
    for _ in range(lanes_n):
        st = init_state(model, ids, per_lane)
        if prime_with is not None:
            pg, pids = prime_with
            st = prime(model, pg, pids, st)
        lanes.append(st)
    U = lanes[0].U
    model.eval()

    rows, w_rows, k_rows, inputs = [], [], [], []
    above = 0
    terminated_by = "max_frames"
    with torch.no_grad():
        for t in range(cfg.max_frames):
            for st in lanes:
                refresh_frame(model, st)
            w_rows.append(torch.cat([st.attn_w for st in lanes]).float().mean(0))
            k_rows.append(torch.cat([st.params.kappa for st in lanes]).mean(0))
            row = np.empty(F)
            frame_inputs = np.empty((F, cfg.Q))
            # each variant's first proposals for the whole frame, drawn from its own stream
            z = np.stack([r.standard_normal(F) for r in variant_rngs], axis=1)
            for f in range(F):
                means = torch.cat([step_with_cache(model, st, f) for st in lanes]).double().numpy()
                mu = float(means.mean())
                sigma = float(sigma_rng.uniform(0.0, cfg.R))
                noisy = sample_truncated_gaussians(mu, sigma, lo, hi, z[f], variant_rngs)
                row[f] = mu
                frame_inputs[f] = noisy
                for li, st in enumerate(lanes):
                    commit(st, f, noisy[li * per_lane:(li + 1) * per_lane])
            for st in lanes:
                end_frame(st)
            rows.append(row)
            inputs.append(frame_inputs)

            loc = float(torch.cat([st.params.location() for st in lanes]).mean())
            above = above + 1 if loc > U - 0.5 else 0
            if above >= cfg.termination_patience:
                terminated_by = "attention"
                break

    T = len(rows)
    grid = MelGrid(np.array(rows).reshape(T, F), "tier1", True)
    weights = torch.stack(w_rows) if T else torch.zeros(0, U)
    kappa = torch.stack(k_rows) if T else torch.zeros(0, model.cfg.M)
    return SampleResult(grid, AttentionRecord(weights, kappa), cfg.seed, T * F, terminated_by,
                        lanes[0].cache.counters, np.array(inputs).reshape(T, F, cfg.Q))
