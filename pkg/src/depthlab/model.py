"""Toy decoder-only transformer with a routed (gated) forward pass, KV cache
with fill-in for skipped layers, and autoregressive generation.

Blocks are pre-norm multi-head causal attention plus a GELU MLP, both with
residual connections. Layer l is gated by a bit G^l: when 0 the hidden state
passes through unchanged and the layer's KV entry for that position is
deferred, to be filled later by projecting the position's incoming hidden
state through this layer's own attention input path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import (
    Graph,
    Tensor,
    _gelu_forward,
    _layer_norm_forward,
    _softmax_forward,
)
from .routing import RouteMask, RoutePlan, full_mask
from . import tokenizer

PROV_ABSENT = 0
PROV_COMPUTED = 1
PROV_FILLED = 2

# gate_fn(layer, incoming_hidden_row) -> execute bit
GateFn = Callable[[int, np.ndarray], int]


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 8
    hidden_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 256
    vocab_size: int = tokenizer.VOCAB_SIZE
    max_context: int = 256
    layer_norm_eps: float = 1e-5

    def __post_init__(self) -> None:
        if min(self.num_layers, self.hidden_dim, self.num_heads, self.ffn_dim, self.vocab_size) < 1:
            raise ValueError("all model dimensions must be positive")
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.max_context < 2:
            raise ValueError("max_context must be >= 2")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (cfg.vocab_size, cfg.hidden_dim),
        "pos_emb": (cfg.max_context, cfg.hidden_dim),
        "final_ln.gain": (cfg.hidden_dim,),
        "final_ln.bias": (cfg.hidden_dim,),
        "head.w": (cfg.hidden_dim, cfg.vocab_size),
        "head.b": (cfg.vocab_size,),
    }
    for l in range(1, cfg.num_layers + 1):
        p = f"layer{l}."
        shapes[p + "ln1.gain"] = (cfg.hidden_dim,)
        shapes[p + "ln1.bias"] = (cfg.hidden_dim,)
        for w in ("wq", "wk", "wv", "wo"):
            shapes[p + w] = (cfg.hidden_dim, cfg.hidden_dim)
        for b in ("bq", "bk", "bv", "bo"):
            shapes[p + b] = (cfg.hidden_dim,)
        shapes[p + "ln2.gain"] = (cfg.hidden_dim,)
        shapes[p + "ln2.bias"] = (cfg.hidden_dim,)
        shapes[p + "w1"] = (cfg.hidden_dim, cfg.ffn_dim)
        shapes[p + "b1"] = (cfg.ffn_dim,)
        shapes[p + "w2"] = (cfg.ffn_dim, cfg.hidden_dim)
        shapes[p + "b2"] = (cfg.hidden_dim,)
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(("ln1.gain", "ln2.gain", "final_ln.gain")):
            params[name] = np.ones(shape)
        elif name.endswith((".bias", "b1", "b2", "bq", "bk", "bv", "bo", "head.b")):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(0.0, 0.02, size=shape)
    return params


class KVCache:
    """Per-layer, per-position key/value rows with provenance tracking.

    Every processed position occupies one slot at every layer: `computed`
    when the layer executed, `absent` (a deferred fill) when it was skipped.
    Slots are immutable once written with a non-absent value.
    """

    def __init__(self, num_layers: int):
        self.num_layers = num_layers
        self.keys: list[list[np.ndarray | None]] = [[] for _ in range(num_layers)]
        self.values: list[list[np.ndarray | None]] = [[] for _ in range(num_layers)]
        self.prov: list[list[int]] = [[] for _ in range(num_layers)]

    @property
    def num_positions(self) -> int:
        return len(self.prov[0])

    def append_computed(self, layer: int, k: np.ndarray, v: np.ndarray) -> None:
        self.keys[layer - 1].append(k)
        self.values[layer - 1].append(v)
        self.prov[layer - 1].append(PROV_COMPUTED)

    def append_absent(self, layer: int) -> None:
        self.keys[layer - 1].append(None)
        self.values[layer - 1].append(None)
        self.prov[layer - 1].append(PROV_ABSENT)

    def fill(self, layer: int, position: int, k: np.ndarray, v: np.ndarray) -> None:
        if self.prov[layer - 1][position] != PROV_ABSENT:
            raise ValueError(f"layer {layer} position {position} already written")
        self.keys[layer - 1][position] = k
        self.values[layer - 1][position] = v
        self.prov[layer - 1][position] = PROV_FILLED

    def kv_matrices(self, layer: int, upto: int) -> tuple[np.ndarray, np.ndarray]:
        """Stacked K and V for positions 0..upto; every slot must be readable."""
        prov = self.prov[layer - 1]
        for j in range(upto + 1):
            if prov[j] == PROV_ABSENT:
                raise ValueError(f"layer {layer} position {j} is absent at read time")
        k = np.stack(self.keys[layer - 1][: upto + 1])
        v = np.stack(self.values[layer - 1][: upto + 1])
        return k, v

    def provenance(self) -> np.ndarray:
        """(num_layers, num_positions) provenance codes."""
        return np.array(self.prov, dtype=np.int64)


class HiddenTrace:
    """Per position, the hidden states h^0..h^L (h^0 = embedding output)."""

    def __init__(self, num_layers: int, hidden_dim: int):
        self.num_layers = num_layers
        self.hidden_dim = hidden_dim
        self.rows: list[np.ndarray] = []  # each (L+1, d)

    def append(self, states: np.ndarray) -> None:
        if states.shape != (self.num_layers + 1, self.hidden_dim):
            raise ValueError(f"trace row shape {states.shape}")
        self.rows.append(states)

    def h(self, position: int, layer: int) -> np.ndarray:
        return self.rows[position][layer]

    @property
    def num_positions(self) -> int:
        return len(self.rows)


@dataclass
class StepResult:
    probs: np.ndarray
    logits: np.ndarray
    bits: tuple[int, ...]


@dataclass
class GenerationResult:
    prompt_ids: list[int]
    generated_ids: list[int]
    trace: HiddenTrace
    cache: KVCache
    step_masks: list[tuple[int, ...]]
    step_probs: list[np.ndarray]

    @property
    def step_costs(self) -> list[int]:
        return [sum(m) for m in self.step_masks]


def _mask_gate(bits: Sequence[int]) -> GateFn:
    return lambda layer, _h: bits[layer - 1]


class DecoderModel:
    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray] | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)
        for name, shape in param_shapes(cfg).items():
            if self.params[name].shape != shape:
                raise ValueError(f"parameter {name} has shape {self.params[name].shape}, expected {shape}")

    # -- basic pieces -------------------------------------------------------

    def embed(self, token_ids: Sequence[int], start_pos: int = 0) -> np.ndarray:
        """Token + position embedding for a run of consecutive positions."""
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise ValueError("token id out of range")
        if start_pos + ids.size > self.cfg.max_context:
            raise ValueError(
                f"context overflow: {start_pos + ids.size} > max_context {self.cfg.max_context}"
            )
        return self.params["tok_emb"][ids] + self.params["pos_emb"][start_pos : start_pos + ids.size]

    def _ln(self, x: np.ndarray, prefix: str) -> np.ndarray:
        return _layer_norm_forward(
            x, self.params[prefix + ".gain"], self.params[prefix + ".bias"], self.cfg.layer_norm_eps
        )

    def _kv_for_state(self, layer: int, h_in: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Key/value rows this layer derives from an incoming hidden state.
        Used both for executed positions and for filling skipped ones."""
        p = f"layer{layer}."
        x = self._ln(h_in, p + "ln1")
        k = x @ self.params[p + "wk"] + self.params[p + "bk"]
        v = x @ self.params[p + "wv"] + self.params[p + "bv"]
        return k, v

    def _fill_absent(self, layer: int, cache: KVCache, trace: HiddenTrace, upto: int) -> None:
        prov = cache.prov[layer - 1]
        for j in range(min(upto + 1, len(prov))):
            if prov[j] == PROV_ABSENT:
                k, v = self._kv_for_state(layer, trace.h(j, layer - 1))
                cache.fill(layer, j, k, v)

    def _attend(self, layer: int, q: np.ndarray, keys: np.ndarray, values: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        hd = cfg.head_dim
        out = np.empty(cfg.hidden_dim)
        scale = 1.0 / math.sqrt(hd)
        for h in range(cfg.num_heads):
            s = slice(h * hd, (h + 1) * hd)
            scores = keys[:, s] @ q[s] * scale
            weights = _softmax_forward(scores)
            out[s] = weights @ values[:, s]
        return out

    # -- incremental routed forward ------------------------------------------

    def step(self, token_id: int, pos: int, gate_fn: GateFn, cache: KVCache, trace: HiddenTrace) -> StepResult:
        """Process one position with per-layer gating, updating cache+trace."""
        cfg = self.cfg
        if cache.num_positions != pos or trace.num_positions != pos:
            raise ValueError(
                f"cache/position inconsistency: cache holds {cache.num_positions} positions, stepping {pos}"
            )
        h = self.embed([token_id], start_pos=pos)[0]
        states = np.empty((cfg.num_layers + 1, cfg.hidden_dim))
        states[0] = h
        bits = []
        for l in range(1, cfg.num_layers + 1):
            bit = int(gate_fn(l, h))
            bits.append(bit)
            if bit:
                p = f"layer{l}."
                x = self._ln(h, p + "ln1")
                q = x @ self.params[p + "wq"] + self.params[p + "bq"]
                k = x @ self.params[p + "wk"] + self.params[p + "bk"]
                v = x @ self.params[p + "wv"] + self.params[p + "bv"]
                self._fill_absent(l, cache, trace, pos - 1)
                cache.append_computed(l, k, v)
                keys, values = cache.kv_matrices(l, pos)
                attn = self._attend(l, q, keys, values)
                h = h + attn @ self.params[p + "wo"] + self.params[p + "bo"]
                x2 = self._ln(h, p + "ln2")
                h = h + _gelu_forward(x2 @ self.params[p + "w1"] + self.params[p + "b1"]) @ self.params[p + "w2"] + self.params[p + "b2"]
            else:
                cache.append_absent(l)
            states[l] = h
        trace.append(states)
        logits = self._ln(h, "final_ln") @ self.params["head.w"] + self.params["head.b"]
        probs = _softmax_forward(logits)
        return StepResult(probs=probs, logits=logits, bits=tuple(bits))

    def routed_forward(
        self,
        token_ids: Sequence[int],
        mask: RouteMask,
        cache: KVCache,
        trace: HiddenTrace,
    ) -> StepResult:
        """Run the not-yet-cached suffix of the sequence under one mask.
        Returns the result at the final position."""
        if len(mask.bits) != self.cfg.num_layers:
            raise ValueError(f"mask has {len(mask.bits)} bits for {self.cfg.num_layers} layers")
        start = cache.num_positions
        if start >= len(token_ids):
            raise ValueError("no new positions to process")
        gate = _mask_gate(mask.bits)
        result = None
        for pos in range(start, len(token_ids)):
            result = self.step(token_ids[pos], pos, gate, cache, trace)
        assert result is not None
        return result

    def full_forward(
        self, token_ids: Sequence[int], cache: KVCache, trace: HiddenTrace
    ) -> StepResult:
        """Unrouted forward: every layer executes, no gating machinery."""
        start = cache.num_positions
        if start >= len(token_ids):
            raise ValueError("no new positions to process")
        result = None
        for pos in range(start, len(token_ids)):
            result = self.step(token_ids[pos], pos, lambda _l, _h: 1, cache, trace)
        assert result is not None
        return result

    def new_state(self) -> tuple[KVCache, HiddenTrace]:
        return KVCache(self.cfg.num_layers), HiddenTrace(self.cfg.num_layers, self.cfg.hidden_dim)

    # -- generation -----------------------------------------------------------

    def generate(
        self,
        prompt_ids: Sequence[int],
        plan: RoutePlan | None = None,
        max_new: int = 64,
        rng_seed: int = 0,
        gate_fn_factory: Callable[[np.random.Generator], GateFn] | None = None,
        sample: bool = False,
        temperature: float = 1.0,
        eos_id: int | None = tokenizer.EOS,
    ) -> GenerationResult:
        """Autoregressive decoding. The prompt always runs under the full mask;
        routing applies to generated positions only. Greedy argmax by default;
        temperature sampling when `sample` is set, seeded by `rng_seed`."""
        if len(prompt_ids) == 0:
            raise ValueError("empty prompt")
        if plan is None and gate_fn_factory is None:
            plan = RoutePlan.full(self.cfg.num_layers)
        cache, trace = self.new_state()
        rng = np.random.default_rng(rng_seed)
        sample_rng = np.random.default_rng((rng_seed, 1))

        prompt = list(prompt_ids)
        fm = full_mask(self.cfg.num_layers)
        result = self.routed_forward(prompt, fm, cache, trace)

        generated: list[int] = []
        step_masks: list[tuple[int, ...]] = []
        step_probs: list[np.ndarray] = []
        previous_mask: RouteMask | None = None
        tokens = prompt
        for _ in range(max_new):
            if sample:
                logits = result.logits / temperature
                probs = _softmax_forward(logits)
                next_id = int(sample_rng.choice(self.cfg.vocab_size, p=probs))
            else:
                next_id = int(np.argmax(result.probs))
            generated.append(next_id)
            if eos_id is not None and next_id == eos_id:
                break
            if len(tokens) >= self.cfg.max_context:
                break
            pos = len(tokens)
            tokens = tokens + [next_id]
            if gate_fn_factory is not None:
                gate = gate_fn_factory(rng)
            else:
                assert plan is not None
                previous_mask = plan.realize(rng, previous=previous_mask)
                gate = _mask_gate(previous_mask.bits)
            result = self.step(next_id, pos, gate, cache, trace)
            step_masks.append(result.bits)
            step_probs.append(result.probs)
        return GenerationResult(
            prompt_ids=prompt,
            generated_ids=generated,
            trace=trace,
            cache=cache,
            step_masks=step_masks,
            step_probs=step_probs,
        )

    def replay_tokens(
        self,
        token_ids: Sequence[int],
        prompt_len: int,
        plan: RoutePlan,
        rng: np.random.Generator | None = None,
    ) -> tuple[HiddenTrace, KVCache, list[tuple[int, ...]]]:
        """Teacher-forced pass over a fixed token sequence: prompt under the
        full mask, each later position under the plan's per-step mask."""
        if not 1 <= prompt_len <= len(token_ids):
            raise ValueError("prompt_len out of range")
        cache, trace = self.new_state()
        self.routed_forward(token_ids[:prompt_len], full_mask(self.cfg.num_layers), cache, trace)
        masks: list[tuple[int, ...]] = []
        previous: RouteMask | None = None
        for pos in range(prompt_len, len(token_ids)):
            previous = plan.realize(rng, previous=previous)
            res = self.step(token_ids[pos], pos, _mask_gate(previous.bits), cache, trace)
            masks.append(res.bits)
        return trace, cache, masks

    # -- parallel (whole-sequence) forward ------------------------------------

    def forward_hidden(
        self, token_ids: Sequence[int], gate_bits: np.ndarray | None = None
    ) -> tuple[np.ndarray, np.ndarray]:
        """Full-sequence causal forward without a cache.

        `gate_bits` is an optional (T, L) 0/1 matrix of per-token gates. K/V
        at each layer always derive from the incoming hidden state, which
        reproduces the cache-fill approximation for skipped tokens. Returns
        (hidden states (T, L+1, d), logits (T, V)).
        """
        cfg = self.cfg
        ids = list(token_ids)
        T = len(ids)
        h = self.embed(ids)
        states = np.empty((T, cfg.num_layers + 1, cfg.hidden_dim))
        states[:, 0] = h
        causal = np.tril(np.ones((T, T), dtype=bool))
        for l in range(1, cfg.num_layers + 1):
            p = f"layer{l}."
            x = self._ln(h, p + "ln1")
            q = x @ self.params[p + "wq"] + self.params[p + "bq"]
            k = x @ self.params[p + "wk"] + self.params[p + "bk"]
            v = x @ self.params[p + "wv"] + self.params[p + "bv"]
            hd = cfg.head_dim
            attn = np.empty_like(h)
            for head in range(cfg.num_heads):
                s = slice(head * hd, (head + 1) * hd)
                scores = q[:, s] @ k[:, s].T / math.sqrt(hd)
                scores = np.where(causal, scores, -1e9)
                weights = _softmax_forward(scores)
                attn[:, s] = weights @ v[:, s]
            out = h + attn @ self.params[p + "wo"] + self.params[p + "bo"]
            x2 = self._ln(out, p + "ln2")
            out = out + _gelu_forward(x2 @ self.params[p + "w1"] + self.params[p + "b1"]) @ self.params[p + "w2"] + self.params[p + "b2"]
            if gate_bits is not None:
                gates = gate_bits[:, l - 1 : l]
                h = gates * out + (1.0 - gates) * h
            else:
                h = out
            states[:, l] = h
        logits = self._ln(h, "final_ln") @ self.params["head.w"] + self.params["head.b"]
        return states, logits

    def predict_distributions(self, token_ids: Sequence[int]) -> np.ndarray:
        """Next-token distributions for every position of a full forward."""
        _, logits = self.forward_hidden(token_ids)
        return _softmax_forward(logits)


def fill_missing_kv(model: DecoderModel, cache: KVCache, trace: HiddenTrace) -> KVCache:
    """Fill every remaining absent cache slot from the nearest executed hidden
    state (the position's incoming state at that layer), using the skipped
    layer's own key/value projection path."""
    upto = cache.num_positions - 1
    for l in range(1, model.cfg.num_layers + 1):
        model._fill_absent(l, cache, trace, upto)
    return cache


# ---------------------------------------------------------------------------
# Tape (differentiable) forward for training
# ---------------------------------------------------------------------------


def graph_leaves(g: Graph, params: dict[str, np.ndarray], trainable: bool = True) -> dict[str, Tensor]:
    return {name: g.leaf(value, requires_grad=trainable, name=name) for name, value in params.items()}


def build_graph_forward(
    g: Graph,
    leaves: dict[str, Tensor],
    cfg: ModelConfig,
    token_ids: Sequence[int],
    layer_gates: Callable[[int, Tensor], Tensor | None] | None = None,
    skip_layers: set[int] | None = None,
) -> Tensor:
    """Differentiable full-sequence forward on a tape.

    `layer_gates(l, h_prev)` may return a (T,) tensor of per-token execute
    gates for layer l (or None to run it ungated). Layers in `skip_layers`
    are left off the graph entirely. Returns the (T, vocab) logits tensor.
    """
    ids = list(token_ids)
    T = len(ids)
    eps = cfg.layer_norm_eps
    tok = g.embedding(leaves["tok_emb"], ids)
    pos = g.slice(leaves["pos_emb"], (np.s_[0:T], np.s_[0 : cfg.hidden_dim]))
    h = g.add(tok, pos)

    for l in range(1, cfg.num_layers + 1):
        if skip_layers and l in skip_layers:
            continue
        p = f"layer{l}."
        x = g.layer_norm(h, leaves[p + "ln1.gain"], leaves[p + "ln1.bias"], eps)
        q = g.add_bias(g.matmul(x, leaves[p + "wq"]), leaves[p + "bq"])
        k = g.add_bias(g.matmul(x, leaves[p + "wk"]), leaves[p + "bk"])
        v = g.add_bias(g.matmul(x, leaves[p + "wv"]), leaves[p + "bv"])
        attn = g.causal_attention(q, k, v, cfg.num_heads)
        out = g.add(h, g.add_bias(g.matmul(attn, leaves[p + "wo"]), leaves[p + "bo"]))
        x2 = g.layer_norm(out, leaves[p + "ln2.gain"], leaves[p + "ln2.bias"], eps)
        mlp = g.add_bias(
            g.matmul(g.gelu(g.add_bias(g.matmul(x2, leaves[p + "w1"]), leaves[p + "b1"])), leaves[p + "w2"]),
            leaves[p + "b2"],
        )
        out = g.add(out, mlp)

        gate = layer_gates(l, h) if layer_gates is not None else None
        if gate is None:
            h = out
        else:
            ones = g.leaf(np.ones(T))
            h = g.add(g.scale_rows(out, gate), g.scale_rows(h, g.add(ones, g.scale(gate, -1.0))))

    hf = g.layer_norm(h, leaves["final_ln.gain"], leaves["final_ln.bias"], eps)
    return g.add_bias(g.matmul(hf, leaves["head.w"]), leaves["head.b"])
