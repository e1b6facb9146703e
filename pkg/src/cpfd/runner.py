"""Config-driven continual training: one model, T steps, metrics on disk."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .corpus import (
    SLICE_POLICIES, Sentence, StepData, StepDataset, SynthConfig, Vocab, build_schedule,
    entity_types, format_conll, generate_synthetic, read_conll, slice_and_mask, split_corpus,
)
from .distill import VARIANTS, DistillConfig, attention_loss, kl_logit_loss
from .evaluation import StepMetrics, aggregate_run, evaluate_sequences, metrics_jsonl, summary_csv
from .model import ModelConfig, TaggerModel, freeze_snapshot
from .objective import balanced_pseudo_ce, compute_weights, total_loss
from .pseudo import MODES, ThresholdTable, build_threshold_table, format_pseudo_dump, pseudo_targets
from .schema import IGNORE, LabelSchema

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


# Component switches for the compared methods and ablations. Keys not
# listed keep the RunConfig defaults (which are the full method).
PRESETS: dict[str, dict] = {
    "cpfd": {},
    "ft": {"distill": "none", "lam": 0.0, "kl_weight": 0.0, "pseudo": "none", "art": False},
    "kl-only": {"distill": "none", "lam": 0.0, "pseudo": "none", "art": False},
    "w-fd": {"distill": "fd"},
    "w-pfd-lax": {"distill": "pfd-lax"},
    "wo-pfd": {"distill": "none", "lam": 0.0},
    "wo-cpl": {"pseudo": "none"},
    "wo-art": {"art": False},
}


@dataclass
class RunConfig:
    # data: CoNLL files when train_path is set, otherwise a synthetic corpus
    train_path: str = ""
    dev_path: str = ""
    test_path: str = ""
    synth_types: int = 4
    synth_per_type: int = 100
    synth_vocab: int = 60
    synth_seed: int = -1  # -1: use seed
    dev_frac: float = 0.15
    test_frac: float = 0.15
    fg: int = 1
    pg: int = 1
    slice_policy: str = "first"
    # model
    layers: int = 2
    heads: int = 2
    d_model: int = 32
    d_ff: int = 64
    max_seq_len: int = 128
    # optimisation
    epochs: int = 0  # 0: 10 when pg == 1, else 20
    batch_size: int = 8
    lr: float = 4e-4
    # method
    distill: str = "pfd"
    lam: float = 2.0
    kl_weight: float = 1.0
    kl_temperature: float = 1.0
    pseudo: str = "cpl"
    art: bool = True
    art_scope: str = "batch"
    # run
    preset: str = ""
    seed: int = 1
    out: str = "runs/default"
    save_checkpoints: bool = True
    dump_pseudo: bool = False
    stop_after_step: int = 0  # 0: run every step

    def __post_init__(self):
        if self.epochs == 0:
            self.epochs = 10 if self.pg == 1 else 20
        if self.epochs < 0 or self.batch_size <= 0:
            raise ConfigError("epochs and batch_size must be positive")
        if self.distill not in VARIANTS + ("none",):
            raise ConfigError(f"distill must be one of {VARIANTS + ('none',)}, got {self.distill!r}")
        if self.pseudo not in MODES:
            raise ConfigError(f"pseudo must be one of {MODES}, got {self.pseudo!r}")
        if self.art_scope not in ("batch", "step"):
            raise ConfigError(f"art_scope must be 'batch' or 'step', got {self.art_scope!r}")
        if self.slice_policy not in SLICE_POLICIES:
            raise ConfigError(f"slice_policy must be one of {SLICE_POLICIES}")
        if self.preset and self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; expected one of {sorted(PRESETS)}")
        self.distill_config()  # validates lambda / kl settings

    def distill_config(self) -> DistillConfig:
        try:
            return DistillConfig(variant=self.distill if self.distill != "none" else "pfd",
                                 lam=self.lam if self.distill != "none" else 0.0,
                                 kl_weight=self.kl_weight, kl_temperature=self.kl_temperature)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def model_config(self, vocab_size: int, longest: int = 0) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, max_seq_len=max(self.max_seq_len, longest),
                           layers=self.layers, heads=self.heads, d_model=self.d_model, d_ff=self.d_ff)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            key = "lambda" if f.name == "lam" else f.name
            lines.append(f"{key} = {v}")
        return "\n".join(lines) + "\n"


_ALIASES = {"lambda": "lam"}


def _coerce(name: str, raw: str, typ):
    try:
        if typ is bool or typ == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return low in ("true", "1", "yes", "on")
        if typ is int or typ == "int":
            return int(raw)
        if typ is float or typ == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"config key {name!r}: cannot parse {raw!r} as {typ}") from None


def make_config(values: dict) -> RunConfig:
    """Build a RunConfig from raw key/value strings or typed values, applying
    ``preset`` first so explicit keys override it."""
    types = {f.name: f.type for f in fields(RunConfig)}
    resolved = {}
    for key, val in values.items():
        name = _ALIASES.get(key, key)
        if name not in types:
            raise ConfigError(f"unknown config key {key!r}")
        resolved[name] = _coerce(name, val, types[name]) if isinstance(val, str) else val
    preset = resolved.get("preset", "")
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
        resolved = {**PRESETS[preset], **resolved}
    return RunConfig(**resolved)


def parse_config_text(text: str) -> RunConfig:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        values[key] = val
    return make_config(values)


def load_config(path) -> RunConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


# -- data preparation -------------------------------------------------------


@dataclass
class Encoded:
    """A dataset as id arrays, gold class arrays and per-step extras."""

    sentences: list[Sentence]
    ids: list[np.ndarray]
    gold: list[np.ndarray]
    targets: list[np.ndarray] = field(default_factory=list)
    old_logits: list[np.ndarray] = field(default_factory=list)
    old_attn: list[np.ndarray] = field(default_factory=list)


def encode(ds: StepDataset, vocab: Vocab, schema: LabelSchema) -> Encoded:
    return Encoded(sentences=ds.sentences,
                   ids=[vocab.encode(s.tokens) for s in ds.sentences],
                   gold=[schema.encode(s.labels) for s in ds.sentences])


def pad_batch(arrays: list[np.ndarray], fill) -> np.ndarray:
    n = max(a.shape[0] for a in arrays)
    out = np.full((len(arrays), n) + arrays[0].shape[1:], fill, dtype=arrays[0].dtype)
    for i, a in enumerate(arrays):
        out[i, :a.shape[0]] = a
    return out


def pad_attn(stacks: list[np.ndarray]) -> np.ndarray:
    n = max(a.shape[-1] for a in stacks)
    out = np.zeros((len(stacks),) + stacks[0].shape[:-2] + (n, n))
    for i, a in enumerate(stacks):
        m = a.shape[-1]
        out[i, ..., :m, :m] = a
    return out


def batches(n: int, size: int, order: np.ndarray | None = None):
    idx = np.arange(n) if order is None else order
    for lo in range(0, n, size):
        yield idx[lo:lo + size]


def run_inference(model: TaggerModel, enc: Encoded, batch_size: int = 32):
    """Per-sentence logits and attention stacks from a frozen forward pass."""
    snap = model if model.frozen else freeze_snapshot(model)
    logits, attn = [], []
    for b in batches(len(enc.ids), batch_size):
        ids = [enc.ids[i] for i in b]
        mask = pad_batch([np.ones(len(x), dtype=bool) for x in ids], False)
        lg, at = snap.forward_batch(pad_batch(ids, 0), mask)
        for j, x in enumerate(ids):
            n = len(x)
            logits.append(lg.data[j, :n])
            attn.append(at.data[j, ..., :n, :n])
    return logits, attn


def predict_labels(model: TaggerModel, enc: Encoded, schema: LabelSchema) -> list[list[str]]:
    logits, _ = run_inference(model, enc)
    return [schema.decode(lg.argmax(axis=-1)) for lg in logits]


def evaluate(model: TaggerModel, enc: Encoded, schema: LabelSchema, types, step: int) -> StepMetrics:
    pred = predict_labels(model, enc, schema)
    return evaluate_sequences(pred, [s.labels for s in enc.sentences], types, step)


def softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def prepare_targets(enc: Encoded, old_model: TaggerModel | None, mode: str) -> ThresholdTable | None:
    """Pre-pass: cache old-model outputs and the training targets."""
    if old_model is None:
        enc.targets = [g.copy() for g in enc.gold]
        return None
    enc.old_logits, enc.old_attn = run_inference(old_model, enc)
    probs = [softmax_np(lg) for lg in enc.old_logits]
    table = build_threshold_table(enc.gold, probs) if mode == "cpl" else None
    enc.targets = [pseudo_targets(g, p, mode, table) for g, p in zip(enc.gold, probs)]
    return table


def pseudo_dump(enc: Encoded, schema: LabelSchema, old_num_classes: int) -> str:
    """Token / current gold / VPL / CPL columns for every training sentence."""
    probs = [softmax_np(lg) for lg in enc.old_logits]
    table = build_threshold_table(enc.gold, probs)
    blocks = []
    for s, g, p in zip(enc.sentences, enc.gold, probs):
        vpl = pseudo_targets(g, p, "vpl")
        cpl = pseudo_targets(g, p, "cpl", table)
        blocks.append(format_pseudo_dump(
            s.tokens, s.labels, schema.decode(vpl),
            ["IGN" if c == IGNORE else schema.labels[c] for c in cpl]))
    return "\n".join(blocks)


# -- training ---------------------------------------------------------------


@dataclass
class StepResult:
    model: TaggerModel
    dev_history: list[float]
    best_epoch: int
    table: ThresholdTable | None


def train_step(model: TaggerModel, old_model: TaggerModel | None, data: StepData,
               schema: LabelSchema, vocab: Vocab, cfg: RunConfig, rng: np.random.Generator,
               dump_path: Path | None = None) -> StepResult:
    """Train one continual step and keep the epoch with the best dev micro-F1."""
    enc = encode(data.train, vocab, schema)
    dev = encode(data.dev, vocab, schema)
    mode = cfg.pseudo if old_model is not None else "none"
    table = prepare_targets(enc, old_model, mode)
    if dump_path is not None and old_model is not None:
        dump_path.write_text(pseudo_dump(enc, schema, old_model.num_classes), encoding="utf-8")

    dcfg = cfg.distill_config()
    use_attn = old_model is not None and cfg.distill != "none" and dcfg.lam > 0
    use_kl = old_model is not None and dcfg.kl_weight > 0
    use_art = old_model is not None and cfg.art
    old_cls, new_cls = schema.old_classes(), schema.new_classes()
    step_counts = None
    if use_art and cfg.art_scope == "step":
        plan = compute_weights(np.concatenate(enc.targets), old_cls, new_cls)
        step_counts = (plan.n_old, plan.n_new)

    opt = ad.Adam(model.parameters(), lr=cfg.lr)
    best_f1, best_state, best_epoch, history = -1.0, model.state_dict(), 0, []
    for epoch in range(1, cfg.epochs + 1):
        for b in batches(len(enc.ids), cfg.batch_size, rng.permutation(len(enc.ids))):
            ids = [enc.ids[i] for i in b]
            lengths = np.array([len(x) for x in ids])
            mask = pad_batch([np.ones(n, dtype=bool) for n in lengths], False)
            targets = pad_batch([enc.targets[i] for i in b], IGNORE)
            logits, attn = model.forward_batch(pad_batch(ids, 0), mask)
            weights = None
            if use_art:
                weights = compute_weights(targets, old_cls, new_cls, counts=step_counts).weights
            ce = balanced_pseudo_ce(logits, targets, weights, lengths)
            attn_term = kl_term = None
            if use_attn:
                qmask = mask[:, None, None, :, None].astype(np.float64)
                old_attn = pad_attn([enc.old_attn[i] for i in b])
                attn_term = ad.scale(attention_loss(cfg.distill, ad.mul(attn, qmask), old_attn),
                                     1.0 / len(b))
            if use_kl:
                old_logits = pad_batch([enc.old_logits[i] for i in b], 0.0)
                kl_term = kl_logit_loss(logits, old_logits, dcfg.kl_temperature, mask)
            loss = total_loss(ce, dcfg, attn_term, kl_term)
            if not np.isfinite(loss.item()):
                raise TrainingError(f"non-finite loss at step {data.step}, epoch {epoch}, "
                                    f"batch sentences {b.tolist()}")
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
        f1 = evaluate(model, dev, schema, data.dev.types, data.step).micro_f1
        history.append(f1)
        log.info("step %d epoch %d dev micro-F1 %.4f", data.step, epoch, f1)
        if f1 > best_f1:
            best_f1, best_state, best_epoch = f1, model.state_dict(), epoch
    model.load_state_dict(best_state)
    return StepResult(model=model, dev_history=history, best_epoch=best_epoch, table=table)


# -- experiments ------------------------------------------------------------


def load_data(cfg: RunConfig, rng: np.random.Generator):
    if cfg.train_path:
        if not (cfg.dev_path and cfg.test_path):
            raise ConfigError("train_path needs dev_path and test_path as well")
        return tuple(read_conll(p) for p in (cfg.train_path, cfg.dev_path, cfg.test_path))
    seed = cfg.seed if cfg.synth_seed < 0 else cfg.synth_seed
    corpus = generate_synthetic(SynthConfig(num_types=cfg.synth_types, per_type=cfg.synth_per_type,
                                            vocab_size=cfg.synth_vocab, seed=seed))
    return split_corpus(corpus, np.random.Generator(np.random.PCG64(seed)), cfg.dev_frac, cfg.test_frac)


@dataclass
class RunReport:
    config: RunConfig
    metrics: list[StepMetrics]
    mean_micro_f1: float
    mean_macro_f1: float
    best_epochs: list[int]
    out_dir: Path
    model: TaggerModel | None = None
    schema: LabelSchema | None = None
    vocab: Vocab | None = None

    @property
    def final(self) -> StepMetrics:
        return self.metrics[-1]


def run_experiment(cfg: RunConfig, on_step: Callable[[StepMetrics], None] | None = None) -> RunReport:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.txt").write_text(cfg.to_text(), encoding="utf-8")
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    train, dev, test = load_data(cfg, rng)
    schedule = build_schedule(entity_types(list(train) + list(dev) + list(test)), cfg.fg, cfg.pg)
    steps = slice_and_mask(train, dev, test, schedule, cfg.slice_policy)
    vocab = Vocab.from_sentences(train)
    (out / "vocab.txt").write_text("\n".join(vocab.itos) + "\n", encoding="utf-8")
    longest = max(len(s.tokens) for s in list(train) + list(dev) + list(test))
    mcfg = cfg.model_config(len(vocab), longest)

    schema = LabelSchema()
    model: TaggerModel | None = None
    metrics, best_epochs = [], []
    for data in steps:
        added = schema.add_step(data.train.types)
        old = None
        if model is None:
            model = TaggerModel(mcfg, schema.num_classes, rng)
        else:
            old = freeze_snapshot(model)
            model.expand_classifier(added, rng)
        dump = out / f"pseudo_step{data.step}.conll" if cfg.dump_pseudo else None
        result = train_step(model, old, data, schema, vocab, cfg, rng, dump)
        model = result.model
        m = evaluate(model, encode(data.test, vocab, schema), schema, data.test.types, data.step)
        metrics.append(m)
        best_epochs.append(result.best_epoch)
        if on_step:
            on_step(m)
        if cfg.save_checkpoints:
            checkpoint.save(out / f"step{data.step}.ckpt", model, schema, data.step)
        if cfg.stop_after_step and data.step >= cfg.stop_after_step:
            break

    summary = aggregate_run(metrics)
    (out / "metrics.jsonl").write_text(metrics_jsonl(metrics), encoding="utf-8")
    (out / "summary.csv").write_text(summary_csv(summary), encoding="utf-8")
    (out / "summary.json").write_text(json.dumps({
        "mean_mi_f1": summary.mean_micro_f1, "mean_ma_f1": summary.mean_macro_f1,
        "final_mi_f1": summary.final.micro_f1, "final_ma_f1": summary.final.macro_f1,
        "mi_f1_series": summary.micro_series(), "ma_f1_series": summary.macro_series(),
        "best_epochs": best_epochs, "schedule": schedule.steps,
    }, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return RunReport(config=cfg, metrics=metrics, mean_micro_f1=summary.mean_micro_f1,
                     mean_macro_f1=summary.mean_macro_f1, best_epochs=best_epochs, out_dir=out,
                     model=model, schema=schema, vocab=vocab)


def write_slices(steps: list[StepData], out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for d in steps:
        for ds in (d.train, d.dev, d.test):
            (out / f"step{d.step}.{ds.split}.conll").write_text(format_conll(ds.sentences), encoding="utf-8")


def with_overrides(cfg: RunConfig, **kw) -> RunConfig:
    return dataclasses.replace(cfg, **kw)
