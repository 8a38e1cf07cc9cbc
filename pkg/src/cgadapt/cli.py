"""Staged command-line pipeline.

Every stage reads artifacts written by earlier stages and writes its own
into ``--out``; nothing is kept in memory between commands.

    cgadapt synth-toy --out toy
    cgadapt fbank --manifest toy/source.tsv --out feats/src
    cgadapt train --source feats/src/feats.tsv --target feats/tgt/feats.tsv --out ckpt
    ...

Exit codes: 0 ok, 2 bad configuration, 3 missing or unreadable artifact,
4 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .backend import BackendModel, adaptive_snorm, stats_pool_embed, train_backend
from .config import ConfigError, field_types, parse_lines
from .dsp.audio import read_wav, resample, write_wav
from .dsp.augment import AugmentSpec, convolve_rir, mix_noise_at_snr
from .dsp.corpus import concat_by_session, filter_top_half_by_snr
from .dsp.features import extract
from .formats import (
    FormatError,
    ManifestEntry,
    load_embeddings,
    load_features,
    load_tensors,
    read_manifest,
    read_pairs,
    read_scores,
    read_trials,
    save_embeddings,
    save_features,
    save_tensors,
    write_manifest,
    write_pairs,
    write_scores,
)
from .metrics import compute_eer, compute_min_dcf
from .models import generator_forward, generator_from_checkpoint, load_checkpoint
from .toy import ToyCorpusSpec, synth_toy, utt_rng
from .training import NumericError, TrainConfig, train

log = logging.getLogger("cgadapt")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4


class MissingArtifactError(FileNotFoundError):
    def __init__(self, stage: str, path):
        super().__init__(f"missing artifact from stage '{stage}': {path}")
        self.stage = stage
        self.path = Path(path)


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class FeatureConfig:
    n_mels: int = 40
    cmn_window: int = 300
    vad_offset: float = 0.0


@dataclass(frozen=True)
class BackendConfig:
    lda_dim: int = 150
    snorm_top_k: int = 200
    p_target: float = 0.01
    c_miss: float = 1.0
    c_fa: float = 1.0


_SECTIONS = {
    "train": TrainConfig,
    "augment": AugmentSpec,
    "features": FeatureConfig,
    "backend": BackendConfig,
    "toy": ToyCorpusSpec,
}


@dataclass(frozen=True)
class PipelineConfig:
    """All tunables of the pipeline.  The global ``seed`` is copied into
    every section that has one, so one number fixes every RNG."""

    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)
    toy: ToyCorpusSpec = field(default_factory=ToyCorpusSpec)
    seed: int = 0

    def with_seed(self, seed: int) -> "PipelineConfig":
        kw = {name: dataclasses.replace(getattr(self, name), seed=seed)
              for name, cls in _SECTIONS.items() if "seed" in field_types(cls)}
        return dataclasses.replace(self, seed=seed, **kw)

    def to_text(self) -> str:
        lines = [f"seed = {self.seed}"]
        for name in _SECTIONS:
            for f in dataclasses.fields(getattr(self, name)):
                if f.name != "seed":
                    lines.append(f"{name}.{f.name} = {getattr(getattr(self, name), f.name)}")
        return "\n".join(lines) + "\n"


def config_keys() -> dict:
    keys = {"seed": int}
    for name, cls in _SECTIONS.items():
        for k, t in field_types(cls).items():
            if k != "seed":
                keys[f"{name}.{k}"] = t
    return keys


def parse_config(text: str, source: str = "<config>", base: PipelineConfig | None = None) -> PipelineConfig:
    """Build a config from ``section.key = value`` lines layered over ``base``."""
    base = base or PipelineConfig()
    values = parse_lines(text.splitlines(), config_keys(), source)
    sections = {}
    for name in _SECTIONS:
        over = {k.split(".", 1)[1]: v for k, v in values.items() if k.startswith(name + ".")}
        try:
            sections[name] = dataclasses.replace(getattr(base, name), **over)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{source}: [{name}] {exc}") from None
    cfg = dataclasses.replace(base, **sections)
    return cfg.with_seed(values.get("seed", base.seed))


def load_config(path=None, seed=None) -> PipelineConfig:
    cfg = PipelineConfig()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        cfg = parse_config(p.read_text(encoding="utf-8"), str(p))
    return cfg.with_seed(cfg.seed if seed is None else seed)


# ---------------------------------------------------------------------------
# helpers


def require(path, stage: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingArtifactError(stage, p)
    return p


def _outdir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def read_feature_list(path, stage: str = "fbank") -> list:
    """``(utt_id, feats, vad)`` for every line of a feature list."""
    out = []
    for uid, fpath in read_pairs(require(path, stage)):
        feats, vad = load_features(require(fpath, stage))
        out.append((uid, feats, vad))
    return out


def _write_feature_set(outdir: Path, items) -> Path:
    listing = []
    for uid, feats, vad in items:
        fpath = outdir / f"{uid}.fbnk"
        save_features(fpath, feats, vad)
        listing.append((uid, str(fpath)))
    lst = outdir / "feats.tsv"
    write_pairs(lst, listing)
    return lst


def _as_store(items) -> list:
    # features are stored as f32, so the trainer sees exactly what was written
    return [(uid, feats[vad]) for uid, feats, vad in items]


def map_features(g, feats: np.ndarray, vad: np.ndarray) -> np.ndarray:
    """Run the voiced frames of one utterance through ``g``; unvoiced frames pass through."""
    out = feats.copy()
    voiced = feats[vad]
    if voiced.shape[0] < 8:
        log.warning("only %d voiced frames; left unmapped", voiced.shape[0])
        return out
    with ad.no_grad():
        y = generator_forward(g, voiced.T[None, None]).data[0, 0].T
    out[vad] = y
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_synth_toy(cfg: PipelineConfig, out) -> dict:
    return synth_toy(cfg.toy, _outdir(out))


def cmd_prepare(cfg: PipelineConfig, manifest, out, concat_sessions=False, snr_filter=False,
                sample_rate=None) -> Path:
    entries = read_manifest(require(manifest, "manifest"))
    outdir = _outdir(out)
    if concat_sessions:
        items = concat_by_session(entries)
    else:
        items = [(e, read_wav(require(e.path, "manifest"))) for e in entries]
    if snr_filter:
        from .dsp.wada import wada_snr

        snr = {e.utt_id: wada_snr(sig) for e, sig in items}
        keep = {e.utt_id for e in filter_top_half_by_snr([e for e, _ in items], lambda e: snr[e.utt_id])}
        items = [(e, s) for e, s in items if e.utt_id in keep]
    written = []
    for e, sig in items:
        if sample_rate is not None and sig.sample_rate != sample_rate:
            sig = resample(sig, sample_rate)
        path = outdir / "wav" / f"{e.utt_id}.wav"
        write_wav(path, sig)
        written.append(dataclasses.replace(e, sample_rate=sig.sample_rate, path=str(path)))
    target = outdir / "manifest.tsv"
    write_manifest(target, written)
    return target


def cmd_augment(cfg: PipelineConfig, manifest, noise_manifest, out, rir_manifest=None) -> Path:
    """Noise (and optionally reverb) every utterance.  Per-utterance RNGs are
    keyed on (seed, utt_id), so results do not depend on manifest order."""
    entries = read_manifest(require(manifest, "manifest"))
    noises = [read_wav(require(e.path, "noise")) for e in read_manifest(require(noise_manifest, "noise"))]
    rirs = []
    if rir_manifest is not None:
        rirs = [read_wav(require(e.path, "rir")) for e in read_manifest(require(rir_manifest, "rir"))]
    outdir = _outdir(out)
    written = []
    for e in entries:
        rng = utt_rng(cfg.seed, "augment/" + e.utt_id)
        sig = read_wav(require(e.path, "manifest"))
        if rirs:
            sig = convolve_rir(sig, rirs[int(rng.integers(0, len(rirs)))])
        sig = mix_noise_at_snr(sig, noises, cfg.augment, rng)
        path = outdir / "wav" / f"{e.utt_id}.wav"
        write_wav(path, sig)
        written.append(dataclasses.replace(e, path=str(path)))
    target = outdir / "manifest.tsv"
    write_manifest(target, written)
    return target


def cmd_fbank(cfg: PipelineConfig, manifest, out) -> Path:
    fc = cfg.features
    items = []
    for e in read_manifest(require(manifest, "manifest")):
        fm = extract(read_wav(require(e.path, "manifest")), e.utt_id, fc.n_mels, fc.cmn_window, fc.vad_offset)
        items.append((e.utt_id, fm.feats, fm.vad))
    return _write_feature_set(_outdir(out), items)


def cmd_train(cfg: PipelineConfig, source, target, out, resume=None, log_fh=None) -> list:
    src = _as_store(read_feature_list(source))
    tgt = _as_store(read_feature_list(target))
    if resume is not None:
        require(resume, "train")
    outdir = _outdir(out)
    (outdir / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    mode = "a" if resume is not None else "w"
    with open(outdir / "train.log", mode, encoding="utf-8") as fh:
        fh.write("# epoch step adv_ts adv_st cyc disc_s disc_t lr_g lr_d\n")
        paths = train(cfg.train, src, tgt, outdir, resume=resume, log_fh=fh)
    return paths


def cmd_map(cfg: PipelineConfig, checkpoint, feats, out) -> Path:
    """Map target-domain features towards the source domain (G_ts only)."""
    g = generator_from_checkpoint(load_checkpoint(require(checkpoint, "train")), prefix="G_ts")
    items = [(uid, map_features(g, f, v), v) for uid, f, v in read_feature_list(feats)]
    return _write_feature_set(_outdir(out), items)


def cmd_embed(cfg: PipelineConfig, feats, out) -> Path:
    ids, vecs = [], []
    for uid, f, v in read_feature_list(feats):
        ids.append(uid)
        vecs.append(stats_pool_embed(f, v))
    path = _outdir(out) / "embeddings.embd"
    save_embeddings(path, ids, np.array(vecs))
    return path


def cmd_backend(cfg: PipelineConfig, embeddings, manifest, out) -> Path:
    ids, x = load_embeddings(require(embeddings, "embed"))
    spk = {e.utt_id: e.speaker_id for e in read_manifest(require(manifest, "manifest"))}
    missing = [u for u in ids if u not in spk]
    if missing:
        raise ConfigError(f"{len(missing)} embeddings have no speaker label, e.g. {missing[0]}")
    model = train_backend(x, [spk[u] for u in ids], cfg.backend.lda_dim)
    path = _outdir(out) / "backend.fmap"
    save_tensors(path, model.to_tensors())
    return path


def _embedding_map(path, stage="embed") -> dict:
    ids, x = load_embeddings(require(path, stage))
    return dict(zip(ids, x))


def cmd_score(cfg: PipelineConfig, backend, trials, enroll, test, out, cohort=None) -> Path:
    model = BackendModel.from_tensors(load_tensors(require(backend, "backend")))
    tr = read_trials(require(trials, "trials"))
    e_map, t_map = _embedding_map(enroll), _embedding_map(test)
    for e, t, _ in tr:
        if e not in e_map:
            raise MissingArtifactError("embed", f"{enroll} (no embedding for {e})")
        if t not in t_map:
            raise MissingArtifactError("embed", f"{test} (no embedding for {t})")
    enr = model.transform(np.array([e_map[e] for e, _, _ in tr]))
    tst = model.transform(np.array([t_map[t] for _, t, _ in tr]))
    scores = model.plda.score(enr, tst)
    if cohort is not None:
        coh = model.transform(np.array(list(_embedding_map(cohort).values())))
        ce = _cohort_scores(model, enr, coh)
        ct = _cohort_scores(model, tst, coh)
        scores = adaptive_snorm(scores, ce, ct, cfg.backend.snorm_top_k)
    if not np.all(np.isfinite(scores)):
        raise NumericError("non-finite trial scores")
    path = _outdir(out) / "scores.txt"
    write_scores(path, [(e, t, float(s)) for (e, t, _), s in zip(tr, scores)])
    return path


def _cohort_scores(model, side, cohort) -> np.ndarray:
    n, m = side.shape[0], cohort.shape[0]
    return model.plda.score(np.repeat(side, m, axis=0), np.tile(cohort, (n, 1))).reshape(n, m)


def cmd_eval(cfg: PipelineConfig, scores, trials, out=None) -> dict:
    sc = {(e, t): s for e, t, s in read_scores(require(scores, "score"))}
    tr = read_trials(require(trials, "trials"))
    try:
        values = np.array([sc[(e, t)] for e, t, _ in tr])
    except KeyError as exc:
        raise MissingArtifactError("score", f"{scores} (no score for trial {exc.args[0]})") from None
    labels = np.array([lab for _, _, lab in tr])
    b = cfg.backend
    report = {
        "eer": compute_eer(values, labels),
        "min_dcf": compute_min_dcf(values, labels, b.p_target, b.c_miss, b.c_fa),
        "p_target": b.p_target,
        "n_target": int(labels.sum()),
        "n_nontarget": int((~labels).sum()),
    }
    print(f"EER {100 * report['eer']:.2f} minDCF {report['min_dcf']:.4f}")
    if out is not None:
        path = _outdir(out) / "report.json"
        path.write_text(json.dumps(report, sort_keys=True) + "\n", encoding="utf-8")
    return report


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="cgadapt", description=__doc__.split("\n\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)

    sub.add_parser("synth-toy", parents=[common], help="write the synthetic two-domain corpus")

    p = sub.add_parser("prepare", parents=[common], help="session concatenation, SNR filter, resampling")
    p.add_argument("--manifest", required=True)
    p.add_argument("--concat-sessions", action="store_true")
    p.add_argument("--snr-filter", action="store_true", help="keep the cleaner half by blind SNR")
    p.add_argument("--sample-rate", type=int)

    p = sub.add_parser("augment", parents=[common], help="add noise events (and reverb)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--noise", required=True, help="noise manifest")
    p.add_argument("--rir", help="impulse-response manifest")

    p = sub.add_parser("fbank", parents=[common], help="log-mel features + VAD")
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("train", parents=[common], help="train the CycleGAN")
    p.add_argument("--source", required=True, help="source feature list")
    p.add_argument("--target", required=True, help="target feature list")
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("map", parents=[common], help="map target features with G_ts")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--feats", required=True)

    p = sub.add_parser("embed", parents=[common], help="stats-pooling embeddings")
    p.add_argument("--feats", required=True)

    p = sub.add_parser("backend", parents=[common], help="train LDA + PLDA")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--manifest", required=True, help="manifest with speaker labels")

    p = sub.add_parser("score", parents=[common], help="PLDA trial scores")
    p.add_argument("--backend", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--enroll", required=True, help="enrolment embeddings")
    p.add_argument("--test", required=True, help="test embeddings")
    p.add_argument("--cohort", help="cohort embeddings; enables adaptive S-norm")

    p = sub.add_parser("eval", parents=[common], help="EER and minDCF")
    p.add_argument("--scores", required=True)
    p.add_argument("--trials", required=True)
    return ap


def dispatch(args, cfg: PipelineConfig):
    c = args.command
    if c == "synth-toy":
        return cmd_synth_toy(cfg, args.out)
    if c == "prepare":
        return cmd_prepare(cfg, args.manifest, args.out, args.concat_sessions, args.snr_filter, args.sample_rate)
    if c == "augment":
        return cmd_augment(cfg, args.manifest, args.noise, args.out, args.rir)
    if c == "fbank":
        return cmd_fbank(cfg, args.manifest, args.out)
    if c == "train":
        return cmd_train(cfg, args.source, args.target, args.out, args.resume)
    if c == "map":
        return cmd_map(cfg, args.checkpoint, args.feats, args.out)
    if c == "embed":
        return cmd_embed(cfg, args.feats, args.out)
    if c == "backend":
        return cmd_backend(cfg, args.embeddings, args.manifest, args.out)
    if c == "score":
        return cmd_score(cfg, args.backend, args.trials, args.enroll, args.test, args.out, args.cohort)
    if c == "eval":
        return cmd_eval(cfg, args.scores, args.trials, args.out)
    raise AssertionError(c)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.seed)
        dispatch(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifactError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
