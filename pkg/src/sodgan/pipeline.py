"""Stage orchestration shared by the command line and the end-to-end tests.

Every stage reads its inputs from a workspace directory, checks that all of them
exist before writing anything, and leaves a ``run.json`` with the resolved
configuration next to its artifacts.
"""
import json
import logging
import os

import numpy as np
import torch

from . import __version__
from .checkpoint import load_checkpoint, read_meta, save_checkpoint
from .corpus import build_corpus, corpus_stats, load_corpus, load_png, save_corpus
from .diffusion import (build_fewshot_set, embed_images, make_schedule, save_fewshot, train_den,
                        train_vae_encoder)
from .errors import DependencyError, InvalidArgumentError
from .generator import sample_latents, train_generator
from .maskgen import generate_masks, train_maskgen
from .metrics import emit_plots, evaluate, write_report
from .quality import FilterPolicy, QualityNet, train_dq
from .saliency import predict_saliency, train_saliency
from .synthesis import attempt_seed, dataset_stats, read_dataset, synthesize_dataset

log = logging.getLogger(__name__)

STAGE_OF = {"corpus": "corpus", "gan": "train-gan", "den": "train-den", "maskgen": "train-maskgen",
            "dq": "train-dq", "synth": "synthesize", "sod": "train-sod"}
DEFAULT_HOME = "sodgan-artifacts"


def resolve_home(cfg, override=None):
    return os.path.abspath(override or os.environ.get("SODGAN_HOME") or cfg.home or DEFAULT_HOME)


class Workspace:
    """Artifact root with one sub-directory per stage."""

    def __init__(self, home):
        self.home = os.path.abspath(home)

    def path(self, *parts):
        return os.path.join(self.home, *parts)

    def require(self, stage_dir, name):
        path = self.path(stage_dir, name)
        if not os.path.exists(path):
            raise DependencyError(STAGE_OF[stage_dir], path)
        return path

    def corpus(self):
        self.require("corpus", "corpus.jsonl")
        return load_corpus(self.path("corpus"))

    def net(self, stage_dir, name):
        return load_checkpoint(self.require(stage_dir, name), STAGE_OF[stage_dir])

    def checksum(self, stage_dir, name):
        return read_meta(self.require(stage_dir, name))["checksum"]


def write_json(path, payload):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def write_run(out_dir, stage, cfg, **extra):
    payload = {"stage": stage, "version": __version__, "config": cfg.to_dict()}
    payload.update(extra)
    return write_json(os.path.join(out_dir, "run.json"), payload)


def _save(module, path, kind, seed, extra=None):
    config = module.config if hasattr(module, "config") else None
    return save_checkpoint(module, path, kind, config, seed, extra)


def _real_pairs(corpus):
    train = corpus.train or corpus.entries
    return np.stack([e.image for e in train]), np.stack([e.mask for e in train])


def synth_stream(g, mg, truncation=1.0):
    """``stream(n, rng)`` -> ``(images, masks)`` of fresh generator samples."""

    def stream(n, rng):
        seeds = rng.integers(0, 2 ** 31, size=n)
        classes = rng.integers(0, g.num_classes, size=n)
        return generate_masks(g, mg, sample_latents(seeds, truncation, g.latent_dim), classes)

    return stream


def mean_iou(probs, gts, threshold=0.5):
    ious = []
    for p, t in zip(probs, gts):
        p, t = np.asarray(p) >= threshold, np.asarray(t) >= 0.5
        union = np.logical_or(p, t).sum()
        ious.append(1.0 if union == 0 else np.logical_and(p, t).sum() / union)
    return float(np.mean(ious))


def reconstruction_masks(g, mg, encoder, entries):
    """Held-out real image -> embed -> generate_mask. Returns the mask probabilities."""
    latents = embed_images(encoder, [e.image for e in entries], [e.class_id for e in entries])
    _, probs = generate_masks(g, mg, latents, [e.class_id for e in entries])
    return probs


# ---- training stages -------------------------------------------------------

def fit_generator(cfg, corpus):
    gc = cfg.generator
    return train_generator(corpus, gc.epochs, gc.seed, gc.latent_dim, gc.base_channels, gc.batch_size,
                           gc.lr, d_lr=gc.d_lr, kl_weight=gc.kl_weight, adv_weight=gc.adv_weight,
                           return_encoder=True)


def fit_den(cfg, corpus, g, d, init_encoder=None):
    dc = cfg.diffusion
    sched = make_schedule(dc.T, dc.beta_start, dc.beta_end)
    return train_den(corpus, g, d, sched, dc.epochs, dc.seed, dc.batch_size, dc.lr,
                     recon_weight=dc.recon_weight, adv_weight=dc.adv_weight, var_weight=dc.var_weight,
                     init_encoder=init_encoder)


def fit_maskgen(cfg, corpus, g, fewshot, head=None, oaff_mode=None, seed=None, joint_dq=True):
    """Train the mask branch (and a D_q alongside it). Returns ``(mg, dq, log)``."""
    mc = cfg.maskgen
    seed = mc.seed if seed is None else seed
    torch.manual_seed(seed)
    dq = QualityNet() if joint_dq else None
    mg, history = train_maskgen(fewshot, g, dq, mc.epochs, seed, head or mc.head, mc.reduced_channels,
                                oaff_mode or mc.oaff_mode, mc.lr, mc.adv_weight, mc.synth_batch,
                                real_pairs=_real_pairs(corpus) if joint_dq else None)
    return mg, dq, history


def fit_dq(cfg, corpus, g, mg, dq=None, seed=None):
    qc = cfg.quality
    images, masks = _real_pairs(corpus)
    return train_dq(images, masks, synth_stream(g, mg, cfg.synth.truncation), qc.epochs,
                    qc.seed if seed is None else seed, dq, qc.batch_size, qc.lr, qc.steps_per_epoch, qc.mismatch)


def fit_saliency(cfg, ds, seed=None):
    sc = cfg.saliency
    return train_saliency(ds, sc.epochs, sc.seed if seed is None else seed, sc.batch_size, sc.lr, sc.width)


def downstream_report(cfg, ds, corpus, seed=None):
    """Train a saliency net on ``ds`` and evaluate it on the corpus test split."""
    net, _ = fit_saliency(cfg, ds, seed)
    test = corpus.test or corpus.entries
    preds = predict_saliency(net, [e.image for e in test])
    return evaluate(list(preds), [e.mask for e in test]), net


def stage_corpus(cfg, ws):
    cc = cfg.corpus
    corpus = build_corpus(cc.n_per_class, cc.num_classes, cc.seed, cc.size, cc.test_fraction)
    out = ws.path("corpus")
    save_corpus(corpus, out)
    write_run(out, "corpus", cfg, counts={"train": len(corpus.train), "test": len(corpus.test)})
    return corpus


def stage_train_gan(cfg, ws):
    from .plots import plot_samples

    corpus = ws.corpus()
    g, d, history, enc = fit_generator(cfg, corpus)
    out = ws.path("gan")
    seed = cfg.generator.seed
    _save(g, os.path.join(out, "generator.pt"), "generator", seed)
    _save(d, os.path.join(out, "discriminator.pt"), "discriminator", seed)
    _save(enc, os.path.join(out, "encoder.pt"), "vae", seed)
    write_json(os.path.join(out, "history.json"), history)
    z = sample_latents([attempt_seed(seed, i) for i in range(16)], 1.0, g.latent_dim)
    with torch.no_grad():
        images, _ = g.eval()(torch.from_numpy(z), torch.arange(16) % g.num_classes)
    plot_samples(list(images.permute(0, 2, 3, 1).numpy()), None, os.path.join(out, "samples.png"))
    write_run(out, "train-gan", cfg)
    return g, d, enc


def stage_train_den(cfg, ws):
    corpus = ws.corpus()
    g, d = ws.net("gan", "generator.pt"), ws.net("gan", "discriminator.pt")
    enc = ws.net("gan", "encoder.pt")
    den, history = fit_den(cfg, corpus, g, d, enc)
    out = ws.path("den")
    _save(den, os.path.join(out, "den.pt"), "den", cfg.diffusion.seed)
    write_json(os.path.join(out, "history.json"), history)
    write_run(out, "train-den", cfg)
    return den


def stage_train_maskgen(cfg, ws):
    from .plots import plot_samples

    corpus = ws.corpus()
    g, den = ws.net("gan", "generator.pt"), ws.net("den", "den.pt")
    mc = cfg.maskgen
    fewshot = build_fewshot_set(corpus, den, mc.fewshot_seed, mc.shots)
    mg, dq, history = fit_maskgen(cfg, corpus, g, fewshot)
    out = ws.path("maskgen")
    save_fewshot(fewshot, out)
    _save(mg, os.path.join(out, "maskgen.pt"), "maskgen", mc.seed)
    _save(dq, os.path.join(out, "dq_joint.pt"), "quality", mc.seed)
    write_json(os.path.join(out, "history.json"), history)
    test = corpus.test or corpus.entries
    iou = mean_iou(reconstruction_masks(g, mg, den, test), [e.mask for e in test])
    z = sample_latents([attempt_seed(mc.seed, i) for i in range(16)], cfg.synth.truncation, g.latent_dim)
    images, masks = generate_masks(g, mg, z, np.arange(16) % g.num_classes)
    plot_samples(list(images), list(masks), os.path.join(out, "samples.png"))
    write_run(out, "train-maskgen", cfg, heldout_mean_iou=round(iou, 6))
    return mg, dq, fewshot


def stage_train_dq(cfg, ws):
    corpus = ws.corpus()
    g, mg = ws.net("gan", "generator.pt"), ws.net("maskgen", "maskgen.pt")
    dq = ws.net("maskgen", "dq_joint.pt")
    history = []
    if cfg.quality.epochs > 0:
        dq, history = fit_dq(cfg, corpus, g, mg, dq)
    out = ws.path("dq")
    _save(dq, os.path.join(out, "dq.pt"), "quality", cfg.quality.seed)
    write_json(os.path.join(out, "history.json"), history)
    write_run(out, "train-dq", cfg)
    return dq


def policy_of(cfg):
    return FilterPolicy(cfg.quality.policy, cfg.quality.policy_value)


def stage_synthesize(cfg, ws, out=None, policy=None, truncation=None, n_keep=None, seed=None):
    g, mg, dq = ws.net("gan", "generator.pt"), ws.net("maskgen", "maskgen.pt"), ws.net("dq", "dq.pt")
    sc = cfg.synth
    checksums = {"generator": ws.checksum("gan", "generator.pt"), "maskgen": ws.checksum("maskgen", "maskgen.pt"),
                 "dq": ws.checksum("dq", "dq.pt")}
    out = out or ws.path("synth")
    ds, header = synthesize_dataset(g, mg, dq, out, n_keep or sc.n_keep,
                                    sc.truncation if truncation is None else truncation,
                                    policy or policy_of(cfg), sc.classes, sc.seed if seed is None else seed,
                                    sc.workers, checksums)
    write_run(out, "synthesize", cfg)
    return ds, header


def stage_train_sod(cfg, ws, dataset="synth"):
    if dataset == "synth":
        ds = read_dataset(os.path.dirname(ws.require("synth", "manifest.jsonl")))
    elif dataset == "corpus":
        ds = ws.corpus()
    else:
        raise InvalidArgumentError(f"unknown dataset {dataset!r}")
    net, history = fit_saliency(cfg, ds)
    out = ws.path("sod")
    _save(net, os.path.join(out, "saliency.pt"), "saliency", cfg.saliency.seed, {"dataset": dataset})
    write_json(os.path.join(out, "history.json"), history)
    write_run(out, "train-sod", cfg, dataset=dataset)
    return net


def load_predictions(directory, entries):
    preds = []
    for e in entries:
        path = os.path.join(directory, f"{e.id}.png")
        if not os.path.exists(path):
            raise FileNotFoundError(f"no prediction for {e.id} in {directory}")
        pred = load_png(path)
        preds.append(pred.mean(axis=-1) if pred.ndim == 3 else pred)
    return preds


def stage_eval(cfg, ws, predictions=None, out=None):
    corpus = ws.corpus()
    test = corpus.test or corpus.entries
    if predictions is None:
        net = ws.net("sod", "saliency.pt")
        preds = list(predict_saliency(net, [e.image for e in test]))
    else:
        preds = load_predictions(predictions, test)
    report = evaluate(preds, [e.mask for e in test])
    out = out or ws.path("eval")
    write_report(report, out, {"n_images": len(test)})
    emit_plots(report, out)
    write_run(out, "eval", cfg, predictions=predictions)
    return report


def stage_analyze(cfg, ws):
    from .plots import plot_stats

    corpus = ws.corpus()
    reports = {"real": corpus_stats(corpus)}
    if os.path.exists(ws.path("synth", "manifest.jsonl")):
        reports["synthetic"] = dataset_stats(read_dataset(ws.path("synth")))
    out = ws.path("analyze")
    for name, rep in reports.items():
        write_json(os.path.join(out, f"stats_{name}.json"), rep.to_dict())
    plot_stats(reports, os.path.join(out, "stats.png"))
    write_run(out, "analyze", cfg, datasets=sorted(reports))
    return reports


# ---- sweeps and ablations ----------------------------------------------------

def latent_variance(seeds, truncation, dim):
    return float(sample_latents(seeds, truncation, dim).var())


def _row(report, **fields):
    row = dict(fields)
    row.update({k: round(v, 6) for k, v in report.scalars().items()})
    return row


def sweep(cfg, ws, axis, values):
    """Synthesize, train, and evaluate once per value of ``truncation`` or ``n_keep``."""
    if axis not in ("lambda", "data-amount"):
        raise InvalidArgumentError(f"unknown sweep axis {axis!r}")
    corpus = ws.corpus()
    dim = ws.net("gan", "generator.pt").latent_dim
    ws.require("maskgen", "maskgen.pt")
    ws.require("dq", "dq.pt")
    rows = []
    for v in values:
        kwargs = {"truncation": float(v)} if axis == "lambda" else {"n_keep": int(v)}
        ds, header = stage_synthesize(cfg, ws, out=ws.path("sweep", axis, f"{v:g}"), **kwargs)
        report, _ = downstream_report(cfg, ds, corpus)
        seeds = [r["latent_seed"] for r in ds.records]
        trunc = kwargs.get("truncation", cfg.synth.truncation)
        rows.append(_row(report, value=v, n_kept=len(ds), acceptance_rate=header["acceptance_rate"],
                         latent_variance=round(latent_variance(seeds, trunc, dim), 6)))
    return _finish_rows(ws.path("sweep", axis), rows, "value", ["max_f", "s_measure", "mae"], axis, False)


ABLATION_AXES = ("den-vs-vae", "oaff", "head", "dq")


def ablate(cfg, ws, axis, seeds=None):
    """Ablation rows, one per (variant, seed). Structural axes are scored on the reconstruction
    pathway of the test split; the ``dq`` axis is scored downstream."""
    from .maskgen import HEAD_WIDTHS, OAFF_MODES

    if axis not in ABLATION_AXES:
        raise InvalidArgumentError(f"unknown ablation axis {axis!r}")
    corpus = ws.corpus()
    g = ws.net("gan", "generator.pt")
    den = ws.net("den", "den.pt")
    if axis == "dq":
        ws.require("maskgen", "maskgen.pt")
        ws.require("dq", "dq.pt")
    seeds = seeds or [cfg.maskgen.seed]
    test = corpus.test or corpus.entries
    gts = [e.mask for e in test]
    rows = []
    if axis == "dq":
        for s in seeds:
            for name, policy in (("w/o dq", FilterPolicy("threshold", 0.0)), ("w/ dq", policy_of(cfg))):
                out = ws.path("ablate", "dq", f"seed{s}", name.replace("/", "").replace(" ", "_"))
                ds, header = stage_synthesize(cfg, ws, out=out, policy=policy, seed=s)
                report, _ = downstream_report(cfg, ds, corpus, seed=s)
                rows.append(_row(report, variant=name, seed=s, acceptance_rate=header["acceptance_rate"]))
        return _finish_rows(ws.path("ablate", "dq"), rows, "variant", ["mae", "max_f"], "D_q", True)

    if axis == "den-vs-vae":
        vae, _ = train_vae_encoder(corpus, g, cfg.diffusion.epochs, cfg.diffusion.seed)
        variants = [("den", {}, den), ("vae", {}, vae)]
    elif axis == "oaff":
        variants = [(m, {"oaff_mode": m}, den) for m in OAFF_MODES]
    else:
        variants = [(h, {"head": h}, den) for h in HEAD_WIDTHS]
    for name, kwargs, encoder in variants:
        fewshot = build_fewshot_set(corpus, encoder, cfg.maskgen.fewshot_seed, cfg.maskgen.shots)
        for s in seeds:
            mg, _, _ = fit_maskgen(cfg, corpus, g, fewshot, seed=s, **kwargs)
            probs = reconstruction_masks(g, mg, encoder, test)
            rows.append(_row(evaluate(list(probs), gts), variant=name, seed=s,
                             mean_iou=round(mean_iou(probs, gts), 6)))
    return _finish_rows(ws.path("ablate", axis), rows, "variant", ["max_f", "s_measure", "mean_iou"], axis, True)


def _finish_rows(out, rows, x_key, y_keys, label, categorical):
    from .plots import plot_rows

    os.makedirs(out, exist_ok=True)
    write_json(os.path.join(out, "rows.json"), rows)
    keys = list(rows[0])
    with open(os.path.join(out, "rows.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(keys) + "\n")
        for r in rows:
            fh.write(",".join(f"{r[k]:.6f}" if isinstance(r[k], float) else str(r[k]) for k in keys) + "\n")
    plot_rows(_mean_rows(rows, x_key, y_keys), x_key, y_keys, os.path.join(out, "rows.png"), label, categorical)
    return rows


def _mean_rows(rows, x_key, y_keys):
    """Average rows sharing the same ``x_key`` (several seeds) for plotting."""
    order, groups = [], {}
    for r in rows:
        if r[x_key] not in groups:
            order.append(r[x_key])
            groups[r[x_key]] = []
        groups[r[x_key]].append(r)
    return [{x_key: x, **{k: float(np.mean([r[k] for r in groups[x]])) for k in y_keys}} for x in order]
