"""Desk-scale MoE decoder: the executable verifier for sequence semantics.

Per layer: a depthwise causal convolution over the padded layout, masked
multi-head attention honoring a compiled MaskSpec exactly, and a top-k MoE
MLP. Vision-token rows additionally pass through low-rank adapter deltas on
the attention, convolution-adjacent, and expert linears; adapters start with
a zero output factor so the model is bit-identical to the adapter-free
pathway at initialization.

Everything runs in float64 with a hand-written backward pass so gradients can
be validated against central finite differences, parameter group by group.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .convpad import PaddedLayout, plan_conv_padding
from .datamodel import (
    N_SPECIAL_TOKENS,
    SequenceLayout,
    TokenInfo,
    TokenRole,
)
from .masking import (
    EMPTY_DECISIONS,
    MaskDecisions,
    MaskSpec,
    compile_block_mask,
    extend_mask_for_decode,
)
from .rng import split_rng


class RouterTieError(RuntimeError):
    """Top-k selection hit a tie; gradients are not defined there."""


@dataclass(frozen=True)
class ToyConfig:
    d_model: int = 32
    n_heads: int = 4
    n_layers: int = 2
    vocab_size: int = 64
    vision_vocab: int = 32
    n_experts: int = 4
    top_k: int = 2
    lora_ranks: tuple[int, int] = (4, 2)  # (r_mlp, r_att)
    conv_kernel: int = 2
    expert_hidden: int | None = None
    lora_scale: float = 1.0
    dual_router: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.top_k > self.n_experts or self.top_k < 1:
            raise ValueError("need 1 <= top_k <= n_experts")
        if min(self.lora_ranks) < 0:
            raise ValueError("adapter ranks must be >= 0")
        if self.conv_kernel < 1:
            raise ValueError("conv kernel must be >= 1")

    @property
    def r_mlp(self) -> int:
        return self.lora_ranks[0]

    @property
    def r_att(self) -> int:
        return self.lora_ranks[1]

    @property
    def hidden(self) -> int:
        return self.expert_hidden if self.expert_hidden is not None else 2 * self.d_model

    @property
    def total_vocab(self) -> int:
        # text ids, special tokens, vision rows, and one pad row
        return self.vocab_size + N_SPECIAL_TOKENS + self.vision_vocab + 1

    @property
    def pad_row(self) -> int:
        return self.total_vocab - 1

    def vision_row(self, ordinal: int) -> int:
        return self.vocab_size + N_SPECIAL_TOKENS + ordinal % self.vision_vocab


@dataclass
class ToyModelParams:
    """All tensors, addressed by dotted name (e.g. "layers.0.wq.lora_b")."""

    config: ToyConfig
    tensors: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def get(self, name: str) -> np.ndarray | None:
        return self.tensors.get(name)

    def copy(self) -> "ToyModelParams":
        return ToyModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def adapter_names(self) -> list[str]:
        return [k for k in self.tensors if ".lora_" in k]

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}


def init_params(config: ToyConfig) -> ToyModelParams:
    """Seeded initialization; adapter output factors start at exactly zero."""
    rng = split_rng(config.seed, "toy-init")
    d, h = config.d_model, config.hidden
    t: dict[str, np.ndarray] = {}

    def linear(name: str, d_in: int, d_out: int, rank: int) -> None:
        t[name + ".w"] = rng.normal(0.0, 1.0 / math.sqrt(d_in), (d_in, d_out))
        if rank > 0:
            t[name + ".lora_a"] = rng.normal(0.0, 1.0 / math.sqrt(d_in), (d_in, rank))
            t[name + ".lora_b"] = np.zeros((rank, d_out))

    t["embed"] = rng.normal(0.0, 0.6, (config.total_vocab, d))
    for l in range(config.n_layers):
        pre = f"layers.{l}"
        t[pre + ".conv_w"] = rng.normal(0.0, 0.5 / math.sqrt(config.conv_kernel), (config.conv_kernel, d))
        linear(pre + ".conv_proj", d, d, config.r_att)
        for proj in ("wq", "wk", "wv", "wo"):
            linear(f"{pre}.{proj}", d, d, config.r_att)
        t[pre + ".router"] = rng.normal(0.0, 1.0 / math.sqrt(d), (d, config.n_experts))
        if config.dual_router:
            t[pre + ".router_vision"] = rng.normal(0.0, 1.0 / math.sqrt(d), (d, config.n_experts))
        for e in range(config.n_experts):
            linear(f"{pre}.experts.{e}.w1", d, h, config.r_mlp)
            linear(f"{pre}.experts.{e}.w2", h, d, config.r_mlp)
    t["head"] = rng.normal(0.0, 1.0 / math.sqrt(d), (d, config.total_vocab))
    return ToyModelParams(config, t)


@dataclass(frozen=True)
class ModelInputs:
    """Everything one forward pass needs, precomputed once per sequence."""

    layout: SequenceLayout
    spec: MaskSpec
    mask: np.ndarray        # dense (n, n) bool
    padded: PaddedLayout
    token_rows: np.ndarray  # (n,) embedding rows
    vision_rows: np.ndarray  # (n,) bool
    pad_source: np.ndarray  # (padded_len,) original index or -1
    orig_pos: np.ndarray    # (n,) padded position per original token

    @property
    def n(self) -> int:
        return self.layout.total_len


def default_token_rows(layout: SequenceLayout, config: ToyConfig) -> np.ndarray:
    """Deterministic embedding rows when the source gave no explicit ids."""
    rows = np.empty(layout.total_len, dtype=np.int64)
    vis_ordinal: dict[int, int] = {}
    for i, tok in enumerate(layout.tokens):
        if tok.role is TokenRole.PAD:
            rows[i] = config.pad_row
        elif tok.role is TokenRole.VISION:
            o = vis_ordinal.get(tok.document_id, 0)
            vis_ordinal[tok.document_id] = o + 1
            rows[i] = config.vision_row(o)
        elif tok.special is not None:
            rows[i] = tok.special.vocab_id(config.vocab_size)
        elif tok.text_id is not None:
            rows[i] = tok.text_id % config.vocab_size
        else:
            rows[i] = (i * 2654435761 + tok.document_id * 97 + 1) % config.vocab_size
    return rows


def prepare_inputs(
    source: SequenceLayout,
    config: ToyConfig,
    *,
    decisions: MaskDecisions | None = None,
    spec: MaskSpec | None = None,
    padded: PaddedLayout | None = None,
    token_rows: np.ndarray | None = None,
    pad_kernel: int | None = None,
) -> ModelInputs:
    """Compile mask, plan conv padding, and derive token rows for a layout."""
    layout = source
    if any(t.role is TokenRole.PAD for t in layout.tokens):
        raise ValueError("model input layouts must not contain pad-role tokens")
    if decisions is None:
        decisions = EMPTY_DECISIONS
    if spec is None:
        spec = compile_block_mask(layout, decisions)
    if spec.sequence_len != layout.total_len:
        raise ValueError("mask compiled for a different sequence length")
    if padded is None:
        padded = plan_conv_padding(layout, pad_kernel or config.conv_kernel, decisions)
    mask = spec.dense()
    if not mask.diagonal().all():
        raise ValueError("every position must at least attend itself")
    if token_rows is None:
        token_rows = default_token_rows(layout, config)
    vision_rows = layout.arrays.role == 0
    return ModelInputs(
        layout=layout,
        spec=spec,
        mask=mask,
        padded=padded,
        token_rows=np.asarray(token_rows, dtype=np.int64),
        vision_rows=vision_rows,
        pad_source=padded.source_array(),
        orig_pos=padded.original_positions(),
    )


@dataclass
class RouterTrace:
    """Routing record: chosen experts, gates, and full distributions."""

    modality_vision: np.ndarray  # (n,) bool
    expert_ids: np.ndarray       # (n, top_k), descending gate order
    gate_values: np.ndarray      # (n, top_k), sums to 1 per token
    probs: np.ndarray            # (n, E) full softmax

    def mean_entropy(self, vision: bool | None = None) -> float:
        p = self.probs if vision is None else self.probs[self.modality_vision == vision]
        if p.size == 0:
            return float("nan")
        logp = np.log(np.where(p > 0, p, 1.0))
        return float(-(p * logp).sum(axis=1).mean())


@dataclass
class ForwardResult:
    logits: np.ndarray
    traces: list[RouterTrace]
    cache: dict | None


def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=axis, keepdims=True)


def _silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def _silu_grad(x: np.ndarray) -> np.ndarray:
    s = 1.0 / (1.0 + np.exp(-x))
    return s * (1.0 + x * (1.0 - s))


def _lora_fwd(params, prefix, x, vis, disable_lora):
    y = x @ params[prefix + ".w"]
    a = params.get(prefix + ".lora_a")
    if a is not None and not disable_lora and vis.any():
        b = params[prefix + ".lora_b"]
        y[vis] += (x[vis] @ a) @ b * params.config.lora_scale
    return y


def _lora_bwd(params, grads, prefix, dy, x, vis, disable_lora):
    grads[prefix + ".w"] += x.T @ dy
    dx = dy @ params[prefix + ".w"].T
    a = params.get(prefix + ".lora_a")
    if a is not None and not disable_lora and vis.any():
        b = params[prefix + ".lora_b"]
        s = params.config.lora_scale
        xv, dyv = x[vis], dy[vis]
        grads[prefix + ".lora_b"] += (xv @ a).T @ dyv * s
        grads[prefix + ".lora_a"] += xv.T @ (dyv @ b.T) * s
        dx[vis] += (dyv @ b.T) @ a.T * s
    return dx


def _conv_fwd(params, prefix, h, inputs):
    k = params.config.conv_kernel
    w = params[prefix + ".conv_w"]
    valid = inputs.pad_source >= 0
    xpad = np.zeros((len(inputs.pad_source), h.shape[1]))
    xpad[valid] = h[inputs.pad_source[valid]]
    cpad = xpad * w[0]
    for t in range(1, k):
        cpad[t:] += xpad[:-t] * w[t]
    return cpad[inputs.orig_pos], xpad


def _conv_bwd(params, grads, prefix, dc, xpad, inputs):
    k = params.config.conv_kernel
    w = params[prefix + ".conv_w"]
    dcpad = np.zeros_like(xpad)
    dcpad[inputs.orig_pos] = dc
    grads[prefix + ".conv_w"][0] += (dcpad * xpad).sum(axis=0)
    dxpad = dcpad * w[0]
    for t in range(1, k):
        grads[prefix + ".conv_w"][t] += (dcpad[t:] * xpad[:-t]).sum(axis=0)
        dxpad[:-t] += dcpad[t:] * w[t]
    valid = inputs.pad_source >= 0
    dh = np.zeros((inputs.n, xpad.shape[1]))
    np.add.at(dh, inputs.pad_source[valid], dxpad[valid])
    return dh


def _route(params, prefix, x, vis):
    cfg = params.config
    scores = x @ params[prefix + ".router"]
    if cfg.dual_router:
        scores = np.where(vis[:, None], x @ params[prefix + ".router_vision"], scores)
    probs = _softmax(scores, axis=1)
    order = np.argsort(-probs, axis=1, kind="stable")
    sel = order[:, : cfg.top_k]
    sel_p = np.take_along_axis(probs, sel, axis=1)
    z = sel_p.sum(axis=1, keepdims=True)
    gate_k = sel_p / z
    gates = np.zeros_like(probs)
    np.put_along_axis(gates, sel, gate_k, axis=1)
    trace = RouterTrace(vis.copy(), sel, gate_k, probs)
    return gates, z, trace


def _moe_fwd(params, prefix, x, vis, disable_lora, want_cache):
    cfg = params.config
    gates, z, trace = _route(params, prefix, x, vis)
    n, d = x.shape
    ys = np.empty((cfg.n_experts, n, d))
    z1s = []
    acts = []
    for e in range(cfg.n_experts):
        epre = f"{prefix}.experts.{e}"
        z1 = _lora_fwd(params, epre + ".w1", x, vis, disable_lora)
        act = _silu(z1)
        ys[e] = _lora_fwd(params, epre + ".w2", act, vis, disable_lora)
        if want_cache:
            z1s.append(z1)
            acts.append(act)
    out = np.einsum("ne,end->nd", gates, ys)
    cache = {"x": x, "gates": gates, "z": z, "ys": ys, "z1s": z1s, "acts": acts, "trace": trace}
    return out, trace, cache if want_cache else None


def _moe_bwd(params, grads, prefix, dout, mc, vis, disable_lora):
    cfg = params.config
    x, gates, z, ys = mc["x"], mc["gates"], mc["z"], mc["ys"]
    trace: RouterTrace = mc["trace"]
    dx = np.zeros_like(x)
    for e in range(cfg.n_experts):
        epre = f"{prefix}.experts.{e}"
        dy = gates[:, e][:, None] * dout
        dact = _lora_bwd(params, grads, epre + ".w2", dy, mc["acts"][e], vis, disable_lora)
        dz1 = dact * _silu_grad(mc["z1s"][e])
        dx += _lora_bwd(params, grads, epre + ".w1", dz1, x, vis, disable_lora)
    # gate path: gates are top-k softmax probs renormalized to sum one
    dgates = np.einsum("nd,end->ne", dout, ys)
    sel = trace.expert_ids
    dg_sel = np.take_along_axis(dgates, sel, axis=1)
    inner = (dg_sel * trace.gate_values).sum(axis=1, keepdims=True)
    dp_sel = (dg_sel - inner) / z
    dprobs = np.zeros_like(gates)
    np.put_along_axis(dprobs, sel, dp_sel, axis=1)
    p = trace.probs
    dscores = p * (dprobs - (dprobs * p).sum(axis=1, keepdims=True))
    if cfg.dual_router:
        txt = ~vis
        grads[prefix + ".router"] += x[txt].T @ dscores[txt]
        grads[prefix + ".router_vision"] += x[vis].T @ dscores[vis]
        dx[txt] += dscores[txt] @ params[prefix + ".router"].T
        dx[vis] += dscores[vis] @ params[prefix + ".router_vision"].T
    else:
        grads[prefix + ".router"] += x.T @ dscores
        dx += dscores @ params[prefix + ".router"].T
    return dx


def moe_dispatch(
    params: ToyModelParams, layer: int, x: np.ndarray, vision_rows: np.ndarray
) -> tuple[np.ndarray, RouterTrace]:
    """Route a batch of token states through one layer's experts."""
    out, trace, _ = _moe_fwd(params, f"layers.{layer}", x, vision_rows, False, False)
    return out, trace


def _run(params, inputs, h0, *, disable_lora=False, want_cache=False):
    cfg = params.config
    n, d = h0.shape
    H, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
    vis = inputs.vision_rows
    scale = 1.0 / math.sqrt(dh)
    cache: dict = {"h0": h0, "layers": []}
    traces: list[RouterTrace] = []
    h = h0
    for l in range(cfg.n_layers):
        pre = f"layers.{l}"
        lc: dict = {"h_in": h}
        c, xpad = _conv_fwd(params, pre, h, inputs)
        u = h + _lora_fwd(params, pre + ".conv_proj", c, vis, disable_lora)
        q = _lora_fwd(params, pre + ".wq", u, vis, disable_lora)
        k = _lora_fwd(params, pre + ".wk", u, vis, disable_lora)
        v = _lora_fwd(params, pre + ".wv", u, vis, disable_lora)
        qh = q.reshape(n, H, dh).transpose(1, 0, 2)
        kh = k.reshape(n, H, dh).transpose(1, 0, 2)
        vh = v.reshape(n, H, dh).transpose(1, 0, 2)
        s = np.where(inputs.mask[None], qh @ kh.transpose(0, 2, 1) * scale, -np.inf)
        p_attn = _softmax(s, axis=2)
        o = (p_attn @ vh).transpose(1, 0, 2).reshape(n, d)
        a = u + _lora_fwd(params, pre + ".wo", o, vis, disable_lora)
        moe_out, trace, mc = _moe_fwd(params, pre, a, vis, disable_lora, want_cache)
        h = a + moe_out
        traces.append(trace)
        if want_cache:
            lc.update(xpad=xpad, c=c, u=u, qh=qh, kh=kh, vh=vh, p_attn=p_attn, o=o, a=a, moe=mc)
            cache["layers"].append(lc)
    logits = h @ params["head"]
    cache["h_final"] = h
    return ForwardResult(logits, traces, cache if want_cache else None)


def forward(
    params: ToyModelParams,
    layout: SequenceLayout,
    mask: MaskSpec,
    padded: PaddedLayout,
    token_rows: np.ndarray | None = None,
    *,
    disable_lora: bool = False,
) -> np.ndarray:
    """Logits per token for one packed sequence."""
    inputs = prepare_inputs(
        layout, params.config, spec=mask, padded=padded, token_rows=token_rows
    )
    return forward_full(params, inputs, disable_lora=disable_lora).logits


def forward_full(
    params: ToyModelParams,
    inputs: ModelInputs,
    *,
    disable_lora: bool = False,
    want_cache: bool = False,
) -> ForwardResult:
    h0 = params["embed"][inputs.token_rows]
    return _run(params, inputs, h0, disable_lora=disable_lora, want_cache=want_cache)


def collect_activations(params: ToyModelParams, inputs: ModelInputs, h0: np.ndarray | None = None):
    """Per-position activation snapshots (embeddings through logits)."""
    if h0 is None:
        h0 = params["embed"][inputs.token_rows]
    res = _run(params, inputs, h0, want_cache=True)
    acts = [res.cache["h0"]]
    for lc in res.cache["layers"]:
        acts.extend([lc["c"], lc["u"], lc["a"]])
    acts.append(res.cache["h_final"])
    acts.append(res.logits)
    return acts


def answer_loss(
    logits: np.ndarray, targets: np.ndarray, layout: SequenceLayout
) -> tuple[float, int]:
    """Summed cross-entropy over loss-flagged positions, with the count.

    Targets must already be aligned to positions (the caller applies any
    next-token shift). The sum is returned undivided so microbatches can be
    normalized jointly.
    """
    loss_mask = layout.arrays.loss
    count = int(loss_mask.sum())
    if count == 0:
        raise ValueError("sequence carries no loss tokens")
    m = logits.max(axis=1)
    lse = m + np.log(np.exp(logits - m[:, None]).sum(axis=1))
    picked = logits[np.arange(len(targets)), targets]
    return float((lse - picked)[loss_mask].sum()), count


def accumulate_normalized_loss(parts: Sequence[tuple[float, int]]) -> float:
    """Total loss over total answer-token count across microbatches."""
    total_count = sum(c for _, c in parts)
    if total_count < 1:
        raise ValueError("no loss tokens across microbatches")
    return sum(s for s, _ in parts) / total_count


def _check_ties(result: ForwardResult, cfg: ToyConfig) -> None:
    if cfg.top_k >= cfg.n_experts:
        return
    for l, trace in enumerate(result.traces):
        p_sorted = -np.sort(-trace.probs, axis=1)
        if np.any(p_sorted[:, cfg.top_k - 1] == p_sorted[:, cfg.top_k]):
            raise RouterTieError(f"router tie in layer {l}; resample the seed")


def loss_and_grads(
    params: ToyModelParams,
    batch: Sequence[tuple[ModelInputs, np.ndarray]],
    *,
    disable_lora: bool = False,
) -> tuple[float, int, dict[str, np.ndarray]]:
    """Normalized loss over a batch plus analytic gradients for every tensor."""
    results = []
    parts = []
    for inputs, targets in batch:
        res = forward_full(params, inputs, disable_lora=disable_lora, want_cache=True)
        _check_ties(res, params.config)
        parts.append(answer_loss(res.logits, targets, inputs.layout))
        results.append(res)
    total_count = sum(c for _, c in parts)
    loss = accumulate_normalized_loss(parts)

    grads = params.zeros_like()
    for (inputs, targets), res in zip(batch, results):
        loss_mask = inputs.layout.arrays.loss
        dlogits = _softmax(res.logits, axis=1)
        dlogits[np.arange(len(targets)), targets] -= 1.0
        dlogits *= loss_mask[:, None] / total_count
        _backward(params, grads, inputs, res, dlogits, disable_lora)
    return loss, total_count, grads


def _backward(params, grads, inputs, res, dlogits, disable_lora):
    cfg = params.config
    cache = res.cache
    n = inputs.n
    H, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
    vis = inputs.vision_rows
    scale = 1.0 / math.sqrt(dh)

    grads["head"] += cache["h_final"].T @ dlogits
    dh_ = dlogits @ params["head"].T
    for l in reversed(range(cfg.n_layers)):
        pre = f"layers.{l}"
        lc = cache["layers"][l]
        # h = a + moe(a)
        da = dh_ + _moe_bwd(params, grads, pre, dh_, lc["moe"], vis, disable_lora)
        # a = u + wo(attn(u))
        do = _lora_bwd(params, grads, pre + ".wo", da, lc["o"], vis, disable_lora)
        doh = do.reshape(n, H, dh).transpose(1, 0, 2)
        p_attn, vh, qh, kh = lc["p_attn"], lc["vh"], lc["qh"], lc["kh"]
        dp = doh @ vh.transpose(0, 2, 1)
        dvh = p_attn.transpose(0, 2, 1) @ doh
        ds = p_attn * (dp - (dp * p_attn).sum(axis=2, keepdims=True))
        dqh = ds @ kh * scale
        dkh = ds.transpose(0, 2, 1) @ qh * scale
        dq = dqh.transpose(1, 0, 2).reshape(n, -1)
        dk = dkh.transpose(1, 0, 2).reshape(n, -1)
        dv = dvh.transpose(1, 0, 2).reshape(n, -1)
        du = da
        du = du + _lora_bwd(params, grads, pre + ".wq", dq, lc["u"], vis, disable_lora)
        du = du + _lora_bwd(params, grads, pre + ".wk", dk, lc["u"], vis, disable_lora)
        du = du + _lora_bwd(params, grads, pre + ".wv", dv, lc["u"], vis, disable_lora)
        # u = h_in + conv_proj(conv(h_in))
        dc = _lora_bwd(params, grads, pre + ".conv_proj", du, lc["c"], vis, disable_lora)
        dh_ = du + _conv_bwd(params, grads, pre, dc, lc["xpad"], inputs)
    np.add.at(grads["embed"], inputs.token_rows, dh_)


def total_normalized_loss(
    params: ToyModelParams,
    batch: Sequence[tuple[ModelInputs, np.ndarray]],
    *,
    disable_lora: bool = False,
) -> float:
    parts = []
    for inputs, targets in batch:
        res = forward_full(params, inputs, disable_lora=disable_lora)
        parts.append(answer_loss(res.logits, targets, inputs.layout))
    return accumulate_normalized_loss(parts)


def grad_check(
    params: ToyModelParams,
    batch: Sequence[tuple[ModelInputs, np.ndarray]],
    eps: float = 1e-5,
) -> dict[str, float]:
    """Max relative error of analytic vs central-difference gradients.

    Relative above a 1e-3 magnitude floor, absolute below it, so exact-zero
    gradient paths compare cleanly against finite-difference noise. Errors on
    a router tie, where the objective is not differentiable.
    """
    _, _, grads = loss_and_grads(params, batch)
    errors: dict[str, float] = {}
    for name, arr in params.tensors.items():
        flat = arr.reshape(-1)
        ga = grads[name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp = total_normalized_loss(params, batch)
            flat[i] = orig - eps
            lm = total_normalized_loss(params, batch)
            flat[i] = orig
            gfd = (lp - lm) / (2.0 * eps)
            rel = abs(ga[i] - gfd) / max(abs(ga[i]) + abs(gfd), 1e-3)
            if rel > worst:
                worst = rel
        errors[name] = worst
    return errors


def lora_weight_decay_step(params: ToyModelParams, lam: float) -> ToyModelParams:
    """Decoupled decay on adapter factors only; base weights untouched."""
    if lam < 0:
        raise ValueError("decay rate must be >= 0")
    out = params.copy()
    for name in out.adapter_names():
        out.tensors[name] *= 1.0 - lam
    return out


# ---------------------------------------------------------------------------
# Incremental decoding


def extend_inputs_for_decode(
    inputs: ModelInputs, gen_rows: np.ndarray, config: ToyConfig
) -> ModelInputs:
    """Inputs for a full forward over prefill plus generated text suffix."""
    from .convpad import PaddedKind, PaddedToken  # local to avoid cycle noise

    gen_rows = np.asarray(gen_rows, dtype=np.int64)
    g = len(gen_rows)
    layout = inputs.layout
    n = layout.total_len
    last_doc = max(t.document_id for t in layout.tokens if t.role is not TokenRole.PAD)
    ext_tokens = layout.tokens + tuple(
        TokenInfo(TokenRole.TEXT, last_doc, None, None, False) for _ in range(g)
    )
    ext_layout = SequenceLayout(ext_tokens, layout.grounding)
    ext_spec = extend_mask_for_decode(inputs.spec, g)
    ext_padded = PaddedLayout(
        inputs.padded.tokens
        + tuple(PaddedToken(PaddedKind.ORIGINAL, n + i) for i in range(g)),
        inputs.padded.kernel,
        ext_layout,
        inputs.padded.decisions,
    )
    return prepare_inputs(
        ext_layout,
        config,
        spec=ext_spec,
        padded=ext_padded,
        token_rows=np.concatenate([inputs.token_rows, gen_rows]),
    )


def decode_incremental(
    params: ToyModelParams, inputs: ModelInputs, gen_rows: np.ndarray
) -> np.ndarray:
    """Logits at each generated position, one token at a time.

    The prefill runs once under the hybrid mask; each generated token then
    attends causally to everything before it and extends the convolution
    history.
    """
    cfg = params.config
    H, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
    scale = 1.0 / math.sqrt(dh)
    res = forward_full(params, inputs, want_cache=True)
    xpad_hist = [list(lc["xpad"]) for lc in res.cache["layers"]]
    k_hist = [list(lc["kh"].transpose(1, 0, 2).reshape(inputs.n, -1)) for lc in res.cache["layers"]]
    v_hist = [list(lc["vh"].transpose(1, 0, 2).reshape(inputs.n, -1)) for lc in res.cache["layers"]]

    no_vis = np.zeros(1, dtype=bool)
    out = np.empty((len(gen_rows), cfg.total_vocab))
    for step, row in enumerate(np.asarray(gen_rows, dtype=np.int64)):
        h = params["embed"][row][None, :]
        for l in range(cfg.n_layers):
            pre = f"layers.{l}"
            xpad_hist[l].append(h[0])
            w = params[pre + ".conv_w"]
            c = np.zeros((1, cfg.d_model))
            for t in range(cfg.conv_kernel):
                if t < len(xpad_hist[l]):
                    c[0] += xpad_hist[l][-1 - t] * w[t]
            u = h + _lora_fwd(params, pre + ".conv_proj", c, no_vis, False)
            q = _lora_fwd(params, pre + ".wq", u, no_vis, False)
            k_hist[l].append(_lora_fwd(params, pre + ".wk", u, no_vis, False)[0])
            v_hist[l].append(_lora_fwd(params, pre + ".wv", u, no_vis, False)[0])
            keys = np.asarray(k_hist[l]).reshape(-1, H, dh).transpose(1, 0, 2)
            vals = np.asarray(v_hist[l]).reshape(-1, H, dh).transpose(1, 0, 2)
            qh = q.reshape(1, H, dh).transpose(1, 0, 2)
            s = qh @ keys.transpose(0, 2, 1) * scale
            p_attn = _softmax(s, axis=2)
            o = (p_attn @ vals).transpose(1, 0, 2).reshape(1, -1)
            a = u + _lora_fwd(params, pre + ".wo", o, no_vis, False)
            moe_out, _, _ = _moe_fwd(params, pre, a, no_vis, False, False)
            h = a + moe_out
        out[step] = (h @ params["head"])[0]
    return out
