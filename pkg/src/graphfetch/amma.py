"""Attention backbone with multi-modality fusion, and its delta / page heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from graphfetch import nn
from graphfetch.features import (CODE_BITS, UNKNOWN, WindowSet, bitmap_size, decode_binary,
                                 encode_binary, index_to_delta)

HEAD_KINDS = ("delta_sigmoid", "page_softmax", "page_binary16")


@dataclass(frozen=True)
class PredictorConfig:
    history: int = 9
    lookforward: int = 256
    attn_dim: int = 64
    fusion_dim: int = 128
    trans_dim: int = 128
    trans_layers: int = 1
    heads: int = 4
    head_layers: int = 1
    ffn_mult: int = 4
    segment_bits: int = 8
    num_segments: int = 8
    positional: str = "sinusoidal"
    spatial_degree: int = 2
    block_bits: int = 6

    def __post_init__(self):
        if self.trans_dim % self.heads:
            raise ValueError("trans_dim must be divisible by heads")
        if self.num_segments * self.segment_bits < 64 - self.block_bits:
            raise ValueError("segments do not cover the block address width")
        if self.positional not in ("none", "sinusoidal"):
            raise ValueError("positional must be 'none' or 'sinusoidal'")
        if self.head_layers < 1 or self.trans_layers < 0 or self.history < 1:
            raise ValueError("invalid layer counts")

    def to_dict(self) -> dict:
        return asdict(self)


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class _Mlp(nn.Module):
    def __init__(self, d_in: int, d_out: int, layers: int, rng):
        super().__init__()
        self.layers = []
        self.acts = []
        d = d_in
        for i in range(layers - 1):
            self.layers.append(self.add_child(f"h{i}", nn.Linear(d, d, rng)))
            self.acts.append(nn.ReLU())
        self.layers.append(self.add_child("out", nn.Linear(d, d_out, rng)))

    def forward(self, x):
        for lin, act in zip(self.layers, self.acts):
            x = act.forward(lin.forward(x))
        return self.layers[-1].forward(x)

    def backward(self, dy):
        dy = self.layers[-1].backward(dy)
        for lin, act in zip(reversed(self.layers[:-1]), reversed(self.acts)):
            dy = lin.backward(act.backward(dy))
        return dy


class AmmaModel(nn.Module):
    """Two-modality attention network.

    address path: segmented block address (delta head) or page tokens (page
    heads) -> embedding -> self-attention; PC path: hashed PC -> embedding ->
    self-attention.  The two sequences are concatenated feature-wise and fused
    by self-attention, passed through L transformer layers, mean-pooled over
    positions and mapped to the head outputs.
    """

    def __init__(self, cfg: PredictorConfig, kind: str, vocab_size: int = 0, seed: int = 0,
                 blocks_per_page: int = 64):
        super().__init__()
        if kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {kind!r}")
        if kind == "page_softmax" and vocab_size < 2:
            raise ValueError("page model needs a vocabulary")
        if kind == "page_binary16" and vocab_size > 1 << CODE_BITS:
            raise ValueError("vocabulary exceeds the 16-bit code space")
        self.cfg, self.kind = cfg, kind
        self.vocab_size = vocab_size
        self.blocks_per_page = blocks_per_page
        rng = np.random.default_rng(seed)
        a, f, t = cfg.attn_dim, cfg.fusion_dim, cfg.trans_dim

        if kind == "delta_sigmoid":
            self.addr_emb = self.add_child("addr_emb", nn.Linear(cfg.num_segments, a, rng))
            self.out_dim = bitmap_size(blocks_per_page)
        elif kind == "page_softmax":
            self.addr_emb = self.add_child("addr_emb", nn.Embedding(vocab_size, a, rng))
            self.out_dim = vocab_size
        else:
            self.addr_emb = self.add_child("addr_emb", nn.Linear(CODE_BITS, a, rng))
            self.out_dim = CODE_BITS
        self.addr_act = nn.ReLU()
        self.pc_emb = self.add_child("pc_emb", nn.Linear(1, a, rng))
        self.pc_act = nn.ReLU()
        self.addr_sa = self.add_child("addr_sa", nn.Residual(nn.SelfAttention(a, a, rng), a))
        self.pc_sa = self.add_child("pc_sa", nn.Residual(nn.SelfAttention(a, a, rng), a))
        fusion = nn.SelfAttention(2 * a, f, rng)
        self.fusion = self.add_child("fusion", nn.Residual(fusion, f) if 2 * a == f else fusion)
        self.bridge = self.add_child("bridge", nn.Linear(f, t, rng)) if f != t else None
        self.layers = [self.add_child(f"trans{i}", nn.TransformerLayer(t, cfg.heads, cfg.ffn_mult * t, rng))
                       for i in range(cfg.trans_layers)]
        self.head = self.add_child("head", _Mlp(t, self.out_dim, cfg.head_layers, rng))
        self._pe = sinusoidal_positions(cfg.history, a) if cfg.positional == "sinusoidal" else None

    # -- inputs ----------------------------------------------------------------

    def address_input(self, ws: WindowSet) -> np.ndarray:
        if self.kind == "delta_sigmoid":
            return ws.addr_segments
        if self.kind == "page_softmax":
            return np.where(ws.page_tokens < self.vocab_size, ws.page_tokens, UNKNOWN)
        return encode_binary(ws.page_tokens)

    # -- forward / backward ----------------------------------------------------

    def features(self, addr: np.ndarray, pc: np.ndarray) -> np.ndarray:
        if addr.shape[-2 if self.kind != "page_softmax" else -1] != pc.shape[-2]:
            raise ValueError("address and PC modalities must have the same length")
        ea = self.addr_act.forward(self.addr_emb.forward(addr))
        ep = self.pc_act.forward(self.pc_emb.forward(pc))
        if self._pe is not None:
            ea = ea + self._pe
            ep = ep + self._pe
        ea = self.addr_sa.forward(ea)
        ep = self.pc_sa.forward(ep)
        x = self.fusion.forward(np.concatenate([ea, ep], axis=-1))
        if self.bridge is not None:
            x = self.bridge.forward(x)
        for layer in self.layers:
            x = layer.forward(x)
        self._n = x.shape[-2]
        return x.mean(axis=-2)

    def forward_arrays(self, addr: np.ndarray, pc: np.ndarray) -> np.ndarray:
        return self.head.forward(self.features(addr, pc))

    def forward(self, ws: WindowSet) -> np.ndarray:
        """Logits, shape (batch, out_dim)."""
        return self.forward_arrays(self.address_input(ws), ws.pc_values)

    def backward(self, dlogits: np.ndarray) -> None:
        dpool = self.head.backward(dlogits)
        dx = np.repeat(dpool[..., None, :], self._n, axis=-2) / self._n
        for layer in reversed(self.layers):
            dx = layer.backward(dx)
        if self.bridge is not None:
            dx = self.bridge.backward(dx)
        dcat = self.fusion.backward(dx)
        a = self.cfg.attn_dim
        dea = self.addr_sa.backward(dcat[..., :a])
        dep = self.pc_sa.backward(dcat[..., a:])
        self.addr_emb.backward(self.addr_act.backward(dea))
        self.pc_emb.backward(self.pc_act.backward(dep))

    # -- outputs -----------------------------------------------------------------

    def predict_proba(self, ws: WindowSet, batch: int = 1024) -> np.ndarray:
        outs = []
        for s in range(0, len(ws), batch):
            z = self.forward(ws.take(slice(s, s + batch)))
            outs.append(nn.softmax(z) if self.kind == "page_softmax" else nn.sigmoid(z))
        if not outs:
            return np.zeros((0, self.out_dim))
        return np.concatenate(outs)


def rank_deltas(scores: np.ndarray, blocks_per_page: int) -> np.ndarray:
    """Bitmap positions ordered by descending score; ties go to smaller |delta|, then positive."""
    deltas = index_to_delta(np.arange(scores.shape[-1]), blocks_per_page)
    scores = np.atleast_2d(scores)
    # lexsort keys are applied last-first
    keys = (deltas < 0, np.abs(deltas))
    out = np.empty(scores.shape, dtype=np.int64)
    for i, row in enumerate(scores):
        out[i] = np.lexsort(keys + (-row,))
    return out


def delta_predict(model: AmmaModel, ws: WindowSet, top: int | None = None):
    """Per window, the ranked ``(delta, score)`` list truncated to ``top`` entries."""
    if model.kind != "delta_sigmoid":
        raise ValueError("delta_predict needs a delta_sigmoid model")
    scores = model.predict_proba(ws)
    order = rank_deltas(scores, model.blocks_per_page)
    if top is not None:
        order = order[:, :top]
    deltas = index_to_delta(order, model.blocks_per_page)
    return [list(zip(d.tolist(), s[o].tolist())) for d, s, o in zip(deltas, scores, order)]


def page_predict(model: AmmaModel, ws: WindowSet) -> tuple[np.ndarray, np.ndarray]:
    """Predicted token and its probability per window; out-of-vocabulary codes decode to UNKNOWN."""
    probs = model.predict_proba(ws)
    if model.kind == "page_softmax":
        tok = probs.argmax(axis=1)
        return tok, probs[np.arange(len(tok)), tok]
    if model.kind == "page_binary16":
        tok = decode_binary(probs)
        conf = np.prod(np.where(probs >= 0.5, probs, 1.0 - probs), axis=1)
        tok = np.where(tok < model.vocab_size, tok, UNKNOWN)
        return tok, conf
    raise ValueError("page_predict needs a page model")


def model_meta(model: AmmaModel, phase: int | None = None, vocab_digest: str = "", **extra) -> dict[str, str]:
    cfg = model.cfg.to_dict()
    meta = {f"cfg.{k}": str(v) for k, v in cfg.items()}
    meta.update(kind=model.kind, vocab_size=str(model.vocab_size),
                blocks_per_page=str(model.blocks_per_page), vocab_digest=vocab_digest,
                phase="" if phase is None else str(phase))
    meta.update({k: str(v) for k, v in extra.items()})
    return meta


def save_model(model: AmmaModel, path, phase: int | None = None, vocab_digest: str = "", **extra) -> None:
    nn.save_tensors(path, model.state_dict(), model_meta(model, phase, vocab_digest, **extra))


def load_model(path) -> tuple[AmmaModel, dict[str, str]]:
    tensors, meta = nn.load_tensors(path)
    try:
        fields = PredictorConfig.__dataclass_fields__
        kw = {}
        for k, f in fields.items():
            raw = meta[f"cfg.{k}"]
            kw[k] = raw if f.type in ("str", str) else int(raw)
        cfg = PredictorConfig(**kw)
        model = AmmaModel(cfg, meta["kind"], int(meta["vocab_size"]), 0, int(meta["blocks_per_page"]))
    except KeyError as exc:
        raise nn.CheckpointError(f"{path}: checkpoint metadata lacks {exc}") from None
    model.load_state_dict(tensors)
    return model, meta
