"""Mini transformer encoder tagger exposing its attention maps."""

from __future__ import annotations

import copy
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

_MASK_FILL = -1e9


@dataclass
class ModelConfig:
    vocab_size: int
    max_seq_len: int = 128
    layers: int = 2
    heads: int = 2
    d_model: int = 32
    d_ff: int = 64

    def __post_init__(self):
        for key, val in asdict(self).items():
            if int(val) <= 0:
                raise ValueError(f"ModelConfig.{key} must be positive, got {val}")
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class TaggerModel:
    """Token classifier over a growing BIO label set.

    ``forward_batch`` returns logits ``(B, n, C)`` and the attention stack
    ``(B, L, K, n, n)``; ``forward`` is the unbatched convenience form.
    """

    def __init__(self, config: ModelConfig, num_classes: int, rng: np.random.Generator):
        if num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        self.config = config
        self.frozen = False
        d, f = config.d_model, config.d_ff
        self.params: dict[str, Tensor] = {}

        def normal(name, shape, std):
            self.params[name] = Tensor(rng.normal(0.0, std, size=shape), requires_grad=True, name=name)

        def const(name, shape, value):
            self.params[name] = Tensor(np.full(shape, value), requires_grad=True, name=name)

        normal("embed", (config.vocab_size, d), 1.0)
        for li in range(config.layers):
            p = f"layer{li}."
            for w in ("wq", "wk", "wv", "wo"):
                normal(p + w, (d, d), d**-0.5)
            const(p + "ln1.g", (d,), 1.0)
            const(p + "ln1.b", (d,), 0.0)
            normal(p + "ff1.w", (d, f), d**-0.5)
            const(p + "ff1.b", (f,), 0.0)
            normal(p + "ff2.w", (f, d), f**-0.5)
            const(p + "ff2.b", (d,), 0.0)
            const(p + "ln2.g", (d,), 1.0)
            const(p + "ln2.b", (d,), 0.0)
        normal("cls0.w", (d, num_classes), 0.02)
        const("cls0.b", (num_classes,), 0.0)
        self._pe = sinusoidal_positions(config.max_seq_len, d)

    def classifier_blocks(self) -> list[tuple[Tensor, Tensor]]:
        n = sum(1 for k in self.params if k.startswith("cls") and k.endswith(".w"))
        return [(self.params[f"cls{i}.w"], self.params[f"cls{i}.b"]) for i in range(n)]

    @property
    def num_classes(self) -> int:
        return sum(w.shape[1] for w, _ in self.classifier_blocks())

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def forward_batch(self, ids: np.ndarray, mask: np.ndarray | None = None):
        ids = np.asarray(ids)
        if ids.ndim != 2:
            raise ValueError(f"forward_batch expects (batch, seq) ids, got shape {ids.shape}")
        B, n = ids.shape
        cfg = self.config
        if n > cfg.max_seq_len:
            raise ValueError(f"sequence length {n} exceeds max_seq_len={cfg.max_seq_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
            raise ValueError(f"token id out of vocabulary range [0, {cfg.vocab_size})")
        if mask is None:
            mask = np.ones((B, n), dtype=bool)
        key_bias = np.where(mask, 0.0, _MASK_FILL)[:, None, :]  # (B, 1, n)

        P = self.params
        h = ad.add(ad.embedding(P["embed"], ids), self._pe[:n])
        dh = cfg.d_model // cfg.heads
        inv_sqrt = 1.0 / np.sqrt(dh)
        layer_maps = []
        for li in range(cfg.layers):
            p = f"layer{li}."
            q = ad.matmul(h, P[p + "wq"])
            k = ad.matmul(h, P[p + "wk"])
            v = ad.matmul(h, P[p + "wv"])
            head_out, head_maps = [], []
            for hi in range(cfg.heads):
                lo, hi_ = hi * dh, (hi + 1) * dh
                qh, kh, vh = (ad.slice_last(t, lo, hi_) for t in (q, k, v))
                scores = ad.add(ad.scale(ad.matmul(qh, ad.transpose(kh)), inv_sqrt), key_bias)
                attn = ad.softmax(scores)
                head_maps.append(attn)
                head_out.append(ad.matmul(attn, vh))
            att = ad.matmul(ad.concat(head_out), P[p + "wo"])
            h = ad.layer_norm(ad.add(h, att), P[p + "ln1.g"], P[p + "ln1.b"])
            ff = ad.gelu(ad.add(ad.matmul(h, P[p + "ff1.w"]), P[p + "ff1.b"]))
            ff = ad.add(ad.matmul(ff, P[p + "ff2.w"]), P[p + "ff2.b"])
            h = ad.layer_norm(ad.add(h, ff), P[p + "ln2.g"], P[p + "ln2.b"])
            layer_maps.append(ad.stack(head_maps, axis=1))
        # one block per expansion keeps earlier class logits bit-identical
        blocks = [ad.add(ad.matmul(h, w), b) for w, b in self.classifier_blocks()]
        logits = blocks[0] if len(blocks) == 1 else ad.concat(blocks)
        return logits, ad.stack(layer_maps, axis=1)

    def forward(self, ids):
        ids = np.asarray(ids)
        logits, attn = self.forward_batch(ids[None, :])
        n = ids.shape[0]
        return (ad.reshape(logits, (n, self.num_classes)),
                ad.reshape(attn, attn.shape[1:]))

    def expand_classifier(self, new_classes: int, rng: np.random.Generator) -> None:
        """Append a block of ``new_classes`` outputs; existing blocks are untouched."""
        if new_classes < 1:
            raise ValueError(f"expand_classifier: new_classes must be >= 1, got {new_classes}")
        i = len(self.classifier_blocks())
        d = self.config.d_model
        for name, value in ((f"cls{i}.w", rng.normal(0.0, 0.02, size=(d, new_classes))),
                            (f"cls{i}.b", np.zeros(new_classes))):
            self.params[name] = Tensor(value, requires_grad=not self.frozen, name=name)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        """Copy values into existing tensors where shapes agree, so optimisers
        keep valid references; classifier blocks follow ``state`` exactly."""
        current = self.params
        self.params = {k: v for k, v in current.items() if not k.startswith("cls")}
        for k, arr in state.items():
            arr = np.array(arr, dtype=np.float64)
            t = current.get(k)
            if t is not None and t.shape == arr.shape:
                t.data[...] = arr
                self.params[k] = t
            else:
                self.params[k] = Tensor(arr, requires_grad=not self.frozen, name=k)

    def predict(self, ids: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Softmax probabilities and argmax classes without recording a tape."""
        snap = self if self.frozen else freeze_snapshot(self)
        logits, _ = snap.forward_batch(ids, mask)
        probs = ad.softmax(logits).data
        return probs, probs.argmax(axis=-1)


def freeze_snapshot(model: TaggerModel) -> TaggerModel:
    """Deep copy whose parameters never require gradients."""
    snap = TaggerModel.__new__(TaggerModel)
    snap.config = copy.deepcopy(model.config)
    snap.frozen = True
    snap._pe = model._pe
    snap.params = {k: Tensor(v.data.copy(), requires_grad=False, name=k)
                   for k, v in model.params.items()}
    return snap
