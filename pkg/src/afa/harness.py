"""Experiment orchestration: pretraining, adversarial meta-training,
multi-trial evaluation, the ablation suite, and gradient-check reports.

Every run is a pure function of (config, seed): RNG substreams are keyed by
purpose, metrics are appended to JSONL files, and checkpoints/TSV tables are
byte-deterministic.
"""
from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .adversary import (
    LambdaSchedule,
    adversarial_step,
    domain_accuracy,
    domain_loss,
    gram_loss,
    gram_losses,
    init_discriminator,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .data import DatasetManifest, default_benchmark, gen_synthetic, split_base_novel, sample_episode
from .encoder import (
    AFFINE,
    AfaLayer,
    AfaParams,
    ConfigError,
    EncoderConfig,
    EncoderParams,
    encode,
    forward_dual,
    init_afa,
    init_afa_nonlinear,
    init_classifier,
    init_encoder,
    lift,
    pretrain_forward,
)
from .heads import Episode, HeadKind, apply_head, episode_accuracy, episode_loss
from .optim import AdamState, grad_check
from .rng import Rng
from .tensor import BatchNormState, Tensor

ABLATIONS = ("none", "no_dd", "no_lg", "nonlinear", "no_afa")


@dataclass
class ExperimentConfig:
    """All knobs of pretraining, meta-training, ablations, and evaluation."""
    data_path: Optional[str] = None
    generate: Optional[dict] = field(default_factory=lambda: {"samples_per_cell": 60})
    n_base: int = 6
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    head: HeadKind = field(default_factory=HeadKind)
    n_way: int = 5
    k_shot: int = 5
    q_queries: int = 16
    iterations: int = 2000
    pretrain_iterations: int = 1000
    pretrain_batch: int = 64
    learning_rate: float = 0.001
    lam: LambdaSchedule = field(default_factory=LambdaSchedule)
    ablation: str = "none"
    no_dd_mode: str = "gram"
    shared_bn_stats: bool = False
    from_scratch: bool = False
    eval_trials: int = 200
    source_domain: int = 0
    seed: int = 0
    out_dir: str = "runs/exp"

    def __post_init__(self):
        if self.iterations < 1 or self.pretrain_iterations < 1:
            raise ConfigError("iteration counts must be >= 1")
        if self.eval_trials < 2:
            raise ConfigError("eval_trials must be >= 2")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}, expected one of {ABLATIONS}")
        if self.no_dd_mode not in ("gram", "lc"):
            raise ConfigError(f"no_dd_mode must be gram or lc, got {self.no_dd_mode!r}")
        if min(self.n_way, self.k_shot, self.q_queries) < 1:
            raise ConfigError("n_way, k_shot, q_queries must be >= 1")

    def to_dict(self) -> dict:
        return {
            "data_path": self.data_path, "generate": self.generate,
            "n_base": self.n_base, "encoder": self.encoder.to_dict(),
            "head": {"kind": self.head.kind, "alpha": self.head.alpha,
                     "sigma": self.head.sigma},
            "n_way": self.n_way, "k_shot": self.k_shot, "q_queries": self.q_queries,
            "iterations": self.iterations,
            "pretrain_iterations": self.pretrain_iterations,
            "pretrain_batch": self.pretrain_batch,
            "learning_rate": self.learning_rate, "lambda": self.lam.spec(),
            "ablation": self.ablation, "no_dd_mode": self.no_dd_mode,
            "shared_bn_stats": self.shared_bn_stats,
            "from_scratch": self.from_scratch, "eval_trials": self.eval_trials,
            "source_domain": self.source_domain, "seed": self.seed,
            "out_dir": self.out_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        kw = dict(d)
        if "encoder" in kw:
            kw["encoder"] = EncoderConfig.from_dict(kw["encoder"])
        if "head" in kw:
            h = kw["head"]
            kw["head"] = HeadKind(h.get("kind", "matching"), h.get("alpha", 0.99),
                                  h.get("sigma"))
        if "lambda" in kw:
            kw["lam"] = LambdaSchedule.parse(kw.pop("lambda"))
        return cls(**kw)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class TrialStats:
    """Per-trial accuracies with mean and normal-approximation 95% half-width."""
    accuracies: list[float]
    mean: float
    half_width: float

    @classmethod
    def from_accuracies(cls, accuracies) -> "TrialStats":
        acc = np.asarray(list(accuracies), dtype=np.float64)
        if acc.size < 2:
            raise ConfigError("TrialStats needs at least 2 trials")
        hw = 1.96 * acc.std(ddof=1) / np.sqrt(acc.size)
        return cls(acc.tolist(), float(acc.mean()), float(hw))

    def to_dict(self) -> dict:
        return {"accuracies": self.accuracies, "mean": self.mean,
                "half_width": self.half_width, "trials": len(self.accuracies)}


def write_jsonl(path: Path, records: list[dict]) -> None:
    with open(path, "a") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


def resolve_dataset(config: ExperimentConfig) -> DatasetManifest:
    """Load the configured manifest, or render the procedural benchmark."""
    if config.data_path:
        return DatasetManifest.load(config.data_path)
    if config.generate is None:
        raise ConfigError("config needs data_path or a generate spec")
    samples = int(config.generate.get("samples_per_cell", 60))
    seed = int(config.generate.get("seed", config.seed))
    out = Path(config.out_dir) / "dataset"
    classes, domains = default_benchmark()
    return gen_synthetic(classes, domains, samples, Rng(seed).substream("data"), out)


def _encoder_from_checkpoint(cfg: EncoderConfig, params: dict, buffers: dict) -> EncoderParams:
    blocks = len(cfg.block_channels)
    conv = [params[f"enc.b{i}.conv"] for i in range(blocks)]
    scale = [params[f"enc.b{i}.bn_scale"] for i in range(blocks)]
    shift = [params[f"enc.b{i}.bn_shift"] for i in range(blocks)]
    states = []
    for i, c in enumerate(cfg.block_channels):
        st = BatchNormState(c)
        st.running_mean = buffers[f"enc.b{i}.bn_mean"].copy()
        st.running_var = buffers[f"enc.b{i}.bn_var"].copy()
        states.append(st)
    return EncoderParams(cfg, conv, scale, shift, states)


def _afa_from_checkpoint(params: dict) -> Optional[AfaParams]:
    gammas = sorted(k for k in params if k.startswith("afa.") and k.endswith(".gamma"))
    kernels = sorted(k for k in params if k.startswith("afa.") and k.endswith(".kernel"))
    if gammas:
        layers = [AfaLayer(params[g], params[g.replace(".gamma", ".beta")])
                  for g in gammas]
        return AfaParams(AFFINE, layers)
    if kernels:
        return AfaParams("conv", [params[k] for k in kernels])
    return None


def run_pretrain(config: ExperimentConfig, manifest: Optional[DatasetManifest] = None) -> Path:
    """Train encoder + linear probe on source-domain base classes with CE."""
    manifest = manifest or resolve_dataset(config)
    base_ids, _ = split_base_novel(manifest, config.n_base)
    rng = Rng(config.seed)
    enc = init_encoder(config.encoder, rng.substream("init"))
    head = init_classifier(config.encoder.out_channels, len(base_ids),
                           rng.substream("init"))
    params = {**enc.named(), **head}
    state = AdamState(lr=config.learning_rate)
    out = Path(config.out_dir) / "pretrain"
    out.mkdir(parents=True, exist_ok=True)
    losses_path = out / "losses.jsonl"
    losses_path.unlink(missing_ok=True)

    cells = [manifest.load_cell(cid, config.source_domain) for cid in base_ids]
    records = []
    for it in range(config.pretrain_iterations):
        brng = rng.substream("pretrain", it)
        slots = brng.integers(0, len(base_ids), (config.pretrain_batch,))
        x = np.empty((config.pretrain_batch, *manifest.image_shape))
        for row, slot in enumerate(slots):
            cell = cells[slot]
            x[row] = cell[int(brng.integers(0, cell.shape[0]))]
        tape = T.Tape()
        p = lift(tape, params)
        logits = pretrain_forward(Tensor(x), config.encoder, p, enc.bn_states)
        loss = T.softmax_cross_entropy(logits, slots)
        if not np.isfinite(loss.data):
            raise RuntimeError(f"pretrain: non-finite loss at iteration {it}")
        grads = tape.backward(loss)
        from .optim import adam_step
        adam_step(params, {k: grads[p[k].tape_id] for k in params}, state)
        acc = float((logits.data.argmax(axis=1) == slots).mean())
        records.append({"iter": it, "loss": float(loss.data), "acc": acc})
    write_jsonl(losses_path, records)

    meta = {"stage": "pretrain", "seed": config.seed,
            "config_hash": config.config_hash(),
            "encoder": config.encoder.to_dict(), "n_base": len(base_ids)}
    return save_checkpoint(out, params, enc.buffers(), meta)


def _episode_tensor(ep: Episode) -> tuple[np.ndarray, int, int]:
    x = np.concatenate([ep.support_x, ep.query_x])
    return x, ep.support_x.shape[0], x.shape[0]


def run_meta_train(config: ExperimentConfig, init_checkpoint: Optional[Path] = None,
                   manifest: Optional[DatasetManifest] = None) -> Path:
    """Episodic adversarial training on source-domain base classes."""
    manifest = manifest or resolve_dataset(config)
    base_ids, _ = split_base_novel(manifest, config.n_base)
    rng = Rng(config.seed)

    if init_checkpoint is not None and not config.from_scratch:
        params, buffers, _ = load_checkpoint(init_checkpoint)
        enc = _encoder_from_checkpoint(config.encoder, params, buffers)
    else:
        enc = init_encoder(config.encoder, rng.substream("init"))

    channels = list(config.encoder.block_channels)
    ablation = config.ablation
    if ablation == "no_afa":
        afa = None
    elif ablation == "nonlinear":
        afa = init_afa_nonlinear(channels, rng.substream("init"))
    else:
        afa = init_afa(channels, rng.substream("init"))
    use_disc = ablation in ("none", "no_lg", "nonlinear")
    disc = init_discriminator(config.encoder.out_channels) if use_disc else {}
    use_gram = ablation in ("none", "no_dd", "nonlinear")

    groups = {"head": {}, "enc": enc.named(),
              "afa": afa.named() if afa else {}, "disc": disc}
    states = {g: AdamState(lr=config.learning_rate) for g in groups}

    out = Path(config.out_dir) / f"meta_{ablation}"
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.jsonl"
    metrics_path.unlink(missing_ok=True)

    n, k, q = config.n_way, config.k_shot, config.q_queries
    records = []
    afa_from_lc = ablation == "no_dd" and config.no_dd_mode == "lc"
    for it in range(config.iterations):
        ep = sample_episode(manifest, base_ids, config.source_domain, n, k, q,
                            rng.substream("meta", "episode", it))
        x, n_sup, n_rows = _episode_tensor(ep)
        progress = it / max(1, config.iterations - 1)
        lam = config.lam.at(progress)

        tape = T.Tape()
        leaves = lift(tape, {name: v for g in groups.values() for name, v in g.items()})
        xt = tape.constant(x)
        if afa is None:
            feats = encode(xt, config.encoder, leaves, enc.bn_states, "train")
            l_d = l_g = None
            site_vals: list[float] = []
            acc_dom = float("nan")
            class_feats = feats
        else:
            dual = forward_dual(xt, config.encoder, leaves, enc.bn_states, afa,
                                mode="train", shared_bn_stats=config.shared_bn_stats)
            l_d = domain_loss(dual.f_o, dual.f_a, leaves) if use_disc else None
            if use_gram:
                l_g, site_vals = gram_losses(dual)
            else:
                l_g, site_vals = None, []
            acc_dom = domain_accuracy(dual.f_o, dual.f_a, leaves) if use_disc else float("nan")
            class_feats = dual.f_a

        sup_f = T.slice_rows(class_feats, 0, n_sup)
        qry_f = T.slice_rows(class_feats, n_sup, n_rows)
        feat_ep = Episode(sup_f, ep.support_y, qry_f, ep.query_y, n, k, q)
        probs = apply_head(feat_ep, config.head)
        l_c = episode_loss(probs, ep.query_y)

        report = adversarial_step(tape, l_c, l_d, l_g, leaves, groups, lam, states,
                                  iteration=it, afa_from_lc=afa_from_lc,
                                  site_gram=site_vals, acc_domain=acc_dom)
        rec = report.to_record(it)
        rec["acc_episode"] = episode_accuracy(probs, ep.query_y)
        if use_disc and (it + 1) % 100 == 0:
            rec["heldout_acc_domain"] = _heldout_domain_accuracy(
                config, manifest, base_ids, enc, afa, groups, it, rng)
        records.append(rec)
    write_jsonl(metrics_path, records)

    params = {name: v for g in groups.values() for name, v in g.items()}
    meta = {"stage": "meta", "seed": config.seed, "ablation": ablation,
            "config_hash": config.config_hash(),
            "encoder": config.encoder.to_dict(),
            "init_checkpoint": str(init_checkpoint) if init_checkpoint else None}
    return save_checkpoint(out, params, enc.buffers(), meta)


def _heldout_domain_accuracy(config, manifest, base_ids, enc, afa, groups,
                             it: int, rng: Rng) -> float:
    """Discriminator accuracy on a fresh episode, without touching any state."""
    ep = sample_episode(manifest, base_ids, config.source_domain, config.n_way,
                        config.k_shot, config.q_queries,
                        rng.substream("meta", "heldout", it))
    x, _, _ = _episode_tensor(ep)
    leaves = lift(None, {name: v for g in groups.values() for name, v in g.items()})
    dual = forward_dual(Tensor(x), config.encoder, leaves, enc.bn_states, afa,
                        mode="train", shared_bn_stats=config.shared_bn_stats,
                        update_running=False)
    return domain_accuracy(dual.f_o, dual.f_a, leaves)


def evaluate_episode(config: ExperimentConfig, enc: EncoderParams,
                     ep: Episode, k: int) -> float:
    x, n_sup, n_rows = _episode_tensor(ep)
    p = lift(None, enc.named())
    feats = encode(Tensor(x), config.encoder, p, enc.bn_states, "eval")
    sup_f = T.slice_rows(feats, 0, n_sup)
    qry_f = T.slice_rows(feats, n_sup, n_rows)
    feat_ep = Episode(sup_f, ep.support_y, qry_f, ep.query_y,
                      ep.n, k, ep.q)
    probs = apply_head(feat_ep, config.head)
    return episode_accuracy(probs, ep.query_y)


def run_eval(config: ExperimentConfig, checkpoint: Path, domain: int,
             pool: str = "novel", k: Optional[int] = None,
             manifest: Optional[DatasetManifest] = None,
             workers: int = 1, tag: str = "") -> TrialStats:
    """T independent trials with the perturbation inactive; persists per-trial values."""
    manifest = manifest or resolve_dataset(config)
    base_ids, novel_ids = split_base_novel(manifest, config.n_base)
    pool_ids = {"base": base_ids, "novel": novel_ids}[pool]
    params, buffers, _ = load_checkpoint(checkpoint)
    enc = _encoder_from_checkpoint(config.encoder, params, buffers)
    k = config.k_shot if k is None else k
    rng = Rng(config.seed)

    def one_trial(trial: int) -> float:
        ep = sample_episode(manifest, pool_ids, domain, config.n_way, k,
                            config.q_queries,
                            rng.substream("eval", pool, domain, k, trial))
        return evaluate_episode(config, enc, ep, k)

    trials = range(config.eval_trials)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool_exec:
            accs = list(pool_exec.map(one_trial, trials))
    else:
        accs = [one_trial(t) for t in trials]
    stats = TrialStats.from_accuracies(accs)

    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    name = tag or f"eval_{pool}_d{domain}_{k}shot"
    trials_path = out / f"{name}.jsonl"
    trials_path.unlink(missing_ok=True)
    write_jsonl(trials_path, [{"trial": t, "acc": a} for t, a in enumerate(accs)])
    (out / f"{name}.json").write_text(json.dumps(stats.to_dict(), sort_keys=True))
    return stats


def run_ablation_suite(config: ExperimentConfig,
                       variants: tuple[str, ...] = ABLATIONS,
                       shots: tuple[int, ...] = (1, 5)) -> Path:
    """Train every variant from one pretrain checkpoint; evaluate per domain x shot."""
    from dataclasses import replace

    manifest = resolve_dataset(config)
    pre = run_pretrain(config, manifest)
    targets = [d for d in manifest.domain_ids() if d != config.source_domain]
    results: dict[str, dict[str, dict]] = {}
    for variant in variants:
        vconf = replace(config, ablation=variant)
        ckpt = run_meta_train(vconf, pre, manifest)
        results[variant] = {}
        for domain in targets:
            for k in shots:
                stats = run_eval(vconf, ckpt, domain, "novel", k, manifest,
                                 tag=f"eval_{variant}_d{domain}_{k}shot")
                results[variant][f"d{domain}_{k}shot"] = stats.to_dict()

    out = Path(config.out_dir)
    columns = [f"d{d}_{k}shot" for d in targets for k in shots]
    lines = ["\t".join(["variant"] + columns)]
    for variant in variants:
        cells = [f"{results[variant][c]['mean']:.4f}±{results[variant][c]['half_width']:.4f}"
                 for c in columns]
        lines.append("\t".join([variant] + cells))
    tsv = out / "ablation.tsv"
    tsv.write_text("\n".join(lines) + "\n")
    (out / "ablation.json").write_text(json.dumps(results, sort_keys=True, indent=1))
    return tsv


GRADCHECK_PATHS = ("l_c_matching", "l_c_proto", "l_c_tpn", "l_d", "l_g", "combined")


def run_gradcheck(config: ExperimentConfig, instances: int = 20,
                  tolerance: float = 1e-4) -> dict:
    """Finite-difference check of every loss path on tiny random networks."""
    rng = Rng(config.seed)
    report = {"tolerance": tolerance, "instances": instances, "paths": {}}
    heads = {"l_c_matching": HeadKind("matching"), "l_c_proto": HeadKind("proto"),
             "l_c_tpn": HeadKind("tpn", sigma=1.5)}
    cfg = EncoderConfig(in_channels=2, in_h=4, in_w=4, block_channels=(3, 4))
    n, k, q = 2, 1, 2
    rows = n * (k + q)
    sup_y = np.repeat(np.arange(n), k)
    qry_y = np.repeat(np.arange(n), q)

    for path in GRADCHECK_PATHS:
        worst = 0.0
        for inst in range(instances):
            sub = rng.substream("gradcheck", path, inst)
            enc = init_encoder(cfg, sub.substream("enc"))
            afa = init_afa(list(cfg.block_channels), sub.substream("afa"))
            disc = init_discriminator(cfg.out_channels)
            disc["disc.w"] = sub.substream("disc").normal(0, 0.5, disc["disc.w"].shape)
            x = sub.substream("x").normal(0, 1, (rows, 2, 4, 4))
            named = {**enc.named(), **afa.named(), **disc}
            keys = sorted(named)

            def build(tape, leaves, path=path, keys=keys, enc=enc, afa=afa, x=x):
                p = dict(zip(keys, leaves))
                dual = forward_dual(tape.constant(x), cfg, p, enc.bn_states, afa)
                if path in heads:
                    sup = T.slice_rows(dual.f_a, 0, n * k)
                    qry = T.slice_rows(dual.f_a, n * k, rows)
                    ep = Episode(sup, sup_y, qry, qry_y, n, k, q)
                    return episode_loss(apply_head(ep, heads[path]), qry_y)
                if path == "l_d":
                    return domain_loss(dual.f_o, dual.f_a, p)
                if path == "l_g":
                    return gram_losses(dual)[0]
                sup = T.slice_rows(dual.f_a, 0, n * k)
                qry = T.slice_rows(dual.f_a, n * k, rows)
                ep = Episode(sup, sup_y, qry, qry_y, n, k, q)
                l_c = episode_loss(apply_head(ep, heads["l_c_matching"]), qry_y)
                l_d = domain_loss(dual.f_o, dual.f_a, p)
                l_g = gram_losses(dual)[0]
                return T.add(l_c, T.sub(l_d, l_g))

            err = grad_check(build, [named[key] for key in keys],
                             sub.substream("coords"), coords_per_param=3)
            worst = max(worst, err)
        report["paths"][path] = {"max_rel_err": worst, "pass": worst <= tolerance}

    report["pass"] = all(p["pass"] for p in report["paths"].values())
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "gradcheck.json").write_text(json.dumps(report, sort_keys=True, indent=1))
    if not report["pass"]:
        failing = [name for name, p in report["paths"].items() if not p["pass"]]
        report["failing"] = failing
    return report
