"""End-to-end toy experiment: corpus -> CycleGAN -> mapped vs unmapped verification.

Speaker split: the first half of the speakers provides the (noise-augmented)
target-domain audio the CycleGAN trains on; the second half is held out for
evaluation.  Source-domain audio of all speakers trains the CycleGAN's source
side and the backend.  Cross-domain trials enrol on source recordings and
test on target recordings of held-out speakers, with or without mapping.
"""
from __future__ import annotations

import dataclasses
import json
import time
from pathlib import Path

import numpy as np

from . import cli
from .formats import load_features, read_manifest, read_pairs, write_manifest, write_pairs, write_trials
from .toy import ToyCorpusSpec
from .training import TrainConfig


def toy_config(seed: int = 0, **train_overrides) -> cli.PipelineConfig:
    """The reduced setting used for desk-scale runs."""
    train = dict(batch_size=8, seq_len=64, epochs=5, plateau_epochs=2, gen_base=8, n_resblocks=2,
                 disc_base=32, lr_gen=1e-3, lr_disc=3e-4)
    train.update(train_overrides)
    cfg = cli.PipelineConfig(
        train=TrainConfig(**train),
        backend=cli.BackendConfig(lda_dim=16, snorm_top_k=20),
        toy=ToyCorpusSpec(utts_per_speaker=40),
    )
    return cfg.with_seed(seed)


def split_speakers(entries) -> tuple:
    spks = sorted({e.speaker_id for e in entries})
    half = len(spks) // 2
    return set(spks[:half]), set(spks[half:])


def make_trials(enroll, test) -> list:
    return [(e.utt_id, t.utt_id, e.speaker_id == t.speaker_id) for e in enroll for t in test]


def paired_l1(pairs, tgt_feats, src_feats) -> float:
    """Mean absolute difference over source-voiced frames, averaged over utterances."""
    vals = []
    for t_uid, s_uid in pairs:
        ft, _ = load_features(tgt_feats[t_uid])
        fs, vad = load_features(src_feats[s_uid])
        vals.append(np.abs(ft[vad] - fs[vad]).mean())
    return float(np.mean(vals))


def run_toy_pipeline(workdir, cfg: cli.PipelineConfig, log=print) -> dict:
    w = Path(workdir)
    w.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()

    def stage(name):
        log(f"[{time.perf_counter() - t0:7.1f}s] {name}")

    stage("synth-toy")
    paths = cli.cmd_synth_toy(cfg, w / "corpus")
    src = read_manifest(paths["source"])
    tgt = read_manifest(paths["target"])
    dev, held = split_speakers(src)
    n_utt = max(int(e.utt_id.rsplit("-u", 1)[1]) for e in src) + 1

    lists = w / "lists"
    lists.mkdir(exist_ok=True)
    write_manifest(lists / "target_dev.tsv", [e for e in tgt if e.speaker_id in dev])
    write_manifest(lists / "target_eval.tsv", [e for e in tgt if e.speaker_id in held])

    stage("augment target (training side only)")
    aug = cli.cmd_augment(cfg, lists / "target_dev.tsv", paths["noise"], w / "augment")

    stage("fbank")
    f_src = cli.cmd_fbank(cfg, paths["source"], w / "feats" / "source")
    f_aug = cli.cmd_fbank(cfg, aug, w / "feats" / "target_aug")
    f_eval = cli.cmd_fbank(cfg, lists / "target_eval.tsv", w / "feats" / "target_eval")

    stage("train")
    ckpts = cli.cmd_train(cfg, f_src, f_aug, w / "ckpt")

    stage("map")
    f_map = cli.cmd_map(cfg, ckpts[-1], f_eval, w / "feats" / "target_mapped")

    stage("embed")
    e_src = cli.cmd_embed(cfg, f_src, w / "emb" / "source")
    e_eval = cli.cmd_embed(cfg, f_eval, w / "emb" / "target_eval")
    e_map = cli.cmd_embed(cfg, f_map, w / "emb" / "target_mapped")

    stage("backend")
    bk = cli.cmd_backend(cfg, e_src, paths["source"], w / "backend")

    enroll = [e for e in src if e.speaker_id in held and int(e.utt_id[-2:]) < n_utt // 2]
    test = [e for e in tgt if e.speaker_id in held and int(e.utt_id[-2:]) >= n_utt // 2]
    trials = lists / "trials.tsv"
    write_trials(trials, make_trials(enroll, test))

    stage("score + eval")
    report = {}
    for name, emb in (("unadapted", e_eval), ("adapted", e_map)):
        sc = cli.cmd_score(cfg, bk, trials, e_src, emb, w / "scores" / name)
        report[name] = cli.cmd_eval(cfg, sc, trials, w / "scores" / name)

    src_lst = dict(read_pairs(f_src))
    held_pairs = [(t, s) for t, s in read_pairs(paths["pairs"]) if t in dict(read_pairs(f_eval))]
    result = {
        "seed": cfg.seed,
        "l1_unmapped": paired_l1(held_pairs, dict(read_pairs(f_eval)), src_lst),
        "l1_mapped": paired_l1(held_pairs, dict(read_pairs(f_map)), src_lst),
        "eer_unadapted": report["unadapted"]["eer"],
        "eer_adapted": report["adapted"]["eer"],
        "min_dcf_unadapted": report["unadapted"]["min_dcf"],
        "min_dcf_adapted": report["adapted"]["min_dcf"],
        "checkpoint": str(ckpts[-1]),
        "seconds": time.perf_counter() - t0,
    }
    result["l1_reduction"] = 1.0 - result["l1_mapped"] / result["l1_unmapped"]
    (w / "result.json").write_text(json.dumps(result, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    stage("done")
    return result


def config_with(cfg: cli.PipelineConfig, **train_overrides) -> cli.PipelineConfig:
    return dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, **train_overrides))
