"""Operator surface: `slmf gen-data|train|eval|inspect --config <path>`.

Exit codes: 0 success, 1 usage error, 2 I/O error, 3 missing dependency
(a stage was requested before its prerequisite checkpoints exist).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .checkpoint import load_checkpoint
from .config import ConfigError, RunConfig, expand_grid, parse_config
from .pipeline import FreezePolicy, Mode

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_MISSING_DEP = 3

STAGES = ("lm", "ctc", "adapter", "retriever", "slm", "grid")
TASKS = ("asr", "dst", "retriever")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _load_config(path: str) -> RunConfig:
    try:
        return parse_config(path)
    except FileNotFoundError:
        print(f"config not found: {path}", file=sys.stderr)
        raise SystemExit(EXIT_IO)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _require(path: Path, stage: str):
    if not path.exists():
        print(f"missing dependency: stage '{stage}' ({path})", file=sys.stderr)
        raise SystemExit(EXIT_MISSING_DEP)


def _ckpt_dir(cfg: RunConfig) -> Path:
    return Path(cfg.paths.checkpoint_dir)


def slm_ckpt_name(cfg: RunConfig) -> str:
    suffix = "" if cfg.training.adapter_pretrained else "_scratch"
    return f"slm_{cfg.training.mode}_{cfg.training.policy}{suffix}.slmf"


def _write_log(path: Path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig) -> int:
    from .experiments import gen_corpus, save_corpus

    corpus = gen_corpus(cfg)
    try:
        save_corpus(corpus, cfg.paths.corpus_dir, store_frames=cfg.synth.store_frames)
    except OSError as exc:
        print(f"cannot write corpus: {exc}", file=sys.stderr)
        return EXIT_IO
    stats = corpus.stats()
    print(f"corpus written to {cfg.paths.corpus_dir}")
    for k, v in sorted(stats.items()):
        print(f"  {k}: {v}")
    return EXIT_OK


def _load_corpus_or_die(cfg: RunConfig):
    from .experiments import load_corpus

    src = Path(cfg.paths.corpus_dir)
    if not (src / "vocab.json").exists():
        print(f"missing dependency: stage 'gen-data' ({src})", file=sys.stderr)
        raise SystemExit(EXIT_MISSING_DEP)
    return load_corpus(src)


def cmd_train(cfg: RunConfig, stage: str, dry_run: bool = False) -> int:
    from . import experiments as ex
    from .pipeline import (
        load_bundle,
        pretrain_adapter,
        pretrain_lm,
        save_bundle,
        train_ctc,
    )

    if stage == "grid":
        runs = expand_grid(cfg)
        print(f"grid: {len(runs)} ordered runs")
        for r in runs:
            print(f"  {r['name']}: policy={r['policy']} mode={r['mode']} adapter_pretrained={r['adapter_pretrained']}")
        if dry_run:
            return EXIT_OK
        for r in runs:
            cfg.training.policy = r["policy"]
            cfg.training.mode = r["mode"]
            cfg.training.adapter_pretrained = r["adapter_pretrained"]
            code = cmd_train(cfg, "slm")
            if code != EXIT_OK:
                return code
        return EXIT_OK

    corpus = _load_corpus_or_die(cfg)
    ckpt = _ckpt_dir(cfg)
    try:
        ckpt.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"cannot create checkpoint dir: {exc}", file=sys.stderr)
        return EXIT_IO
    mc = ex.build_model_config(cfg, corpus.vocab)
    steps, batch, lr = cfg.training.resolve(stage if stage in ("lm", "ctc", "adapter", "retriever", "slm") else "slm")
    seed = cfg.seed

    if dry_run:
        print(f"would train stage {stage}: steps={steps} batch={batch} lr={lr}")
        return EXIT_OK

    if stage == "lm":
        from .model import build_bundle

        bundle = build_bundle(mc, seed=seed)
        log = pretrain_lm(bundle, steps=steps, batch_size=batch, lr=lr, seed=seed)
        save_bundle(ckpt / "lm.slmf", bundle, stage="lm", step=steps)
        _write_log(ckpt / "lm_log.jsonl", log)
    elif stage == "ctc":
        _require(ckpt / "lm.slmf", "lm")
        bundle, meta = load_bundle(ckpt / "lm.slmf")
        log = train_ctc(bundle, corpus.asr_train, corpus.vocab, corpus.synth,
                        steps=steps, batch_size=batch, lr=lr, seed=seed)
        save_bundle(ckpt / "ctc.slmf", bundle, stage="ctc", step=steps)
        _write_log(ckpt / "ctc_log.jsonl", log)
    elif stage == "adapter":
        _require(ckpt / "ctc.slmf", "ctc")
        bundle, meta = load_bundle(ckpt / "ctc.slmf")
        cache = ex.encode_asr_cache(corpus, "asr_train", corpus.asr_train, bundle)
        log = pretrain_adapter(bundle, cache, [u.text for u in corpus.asr_train],
                               steps=steps, batch_size=batch, lr=lr, seed=seed)
        save_bundle(ckpt / "adapter.slmf", bundle, stage="adapter", step=steps)
        _write_log(ckpt / "adapter_log.jsonl", log)
    elif stage == "slm":
        mode = Mode(cfg.training.mode)
        base_name = "adapter.slmf" if cfg.training.adapter_pretrained else "ctc.slmf"
        _require(ckpt / base_name, "adapter" if cfg.training.adapter_pretrained else "ctc")
        bundle, meta = load_bundle(ckpt / base_name)
        cache = ex.encode_dialog_cache(corpus, corpus.train_dialogs, bundle)
        retriever = index = rparams = None
        if mode is Mode.RESLM:
            from .retriever import load_index, load_retriever

            _require(ckpt / "retriever.slmf", "retriever")
            _require(ckpt / "index_train.slmf", "retriever")
            retriever, _ = load_retriever(ckpt / "retriever.slmf")
            index = load_index(ckpt / "index_train.slmf")
            sample = [c.kept_or_full for c in list(cache.values())[:50]]
            rparams = ex.resolve_retrieval_params(cfg, retriever, index, sample)
        from .pipeline import build_turn_examples, train_slm

        examples = build_turn_examples(corpus.train_dialogs, bundle, cache, mode,
                                       retriever_bundle=retriever, index=index, retrieval_params=rparams)
        log = train_slm(bundle, examples, FreezePolicy(cfg.training.policy), mode,
                        steps=steps, batch_size=batch, lr=lr, seed=seed, dropout=cfg.training.dropout)
        save_bundle(ckpt / slm_ckpt_name(cfg), bundle, stage="slm", step=steps,
                    extra={"policy": cfg.training.policy, "mode": cfg.training.mode})
        _write_log(ckpt / (slm_ckpt_name(cfg).replace(".slmf", "_log.jsonl")), log)
    elif stage == "retriever":
        from .retriever import build_index, build_retriever, save_index, save_retriever, train_retriever

        slm_cfg = RunConfig(**vars(cfg))  # SLM (non-augmented) checkpoint feeds the towers
        slm_cfg.training.mode = "SLM"
        slm_name = slm_ckpt_name(slm_cfg)
        _require(ckpt / slm_name, "slm")
        slm_bundle, _ = load_bundle(ckpt / slm_name)
        cache = ex.encode_dialog_cache(corpus, corpus.train_dialogs, slm_bundle)
        examples = ex.retriever_examples(corpus.train_dialogs, cache)
        rb = build_retriever(slm_bundle, d_r=cfg.training.d_r, seed=seed)
        log = train_retriever(rb, examples, steps=steps, batch_size=batch, lr=lr,
                              temperature=cfg.training.temperature, seed=seed)
        save_retriever(ckpt / "retriever.slmf", rb, meta={"stage": "retriever", "step": steps})
        save_index(ckpt / "index_train.slmf", build_index(corpus.train_entities, rb))
        save_index(ckpt / "index_eval.slmf", build_index(corpus.eval_entities, rb))
        _write_log(ckpt / "retriever_log.jsonl", log)
    else:
        print(f"unknown stage {stage}", file=sys.stderr)
        return EXIT_USAGE
    print(f"stage {stage} done: steps={steps} batch={batch} lr={lr}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, task: str) -> int:
    from . import experiments as ex
    from .pipeline import load_bundle

    corpus = _load_corpus_or_die(cfg)
    ckpt = _ckpt_dir(cfg)
    report_dir = Path(cfg.paths.report_dir)
    try:
        report_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"cannot create report dir: {exc}", file=sys.stderr)
        return EXIT_IO

    if task == "asr":
        stage = cfg.eval.stage
        if stage == "auto":
            name = slm_ckpt_name(cfg)
            name = name if (ckpt / name).exists() else "adapter.slmf"
        else:
            name = "adapter.slmf" if stage == "adapter" else slm_ckpt_name(cfg)
        _require(ckpt / name, name.replace(".slmf", ""))
        bundle, _ = load_bundle(ckpt / name)
        cache = ex.encode_asr_cache(corpus, "asr_eval", corpus.asr_eval, bundle)
        res = ex.eval_asr(bundle, cache, [u.text for u in corpus.asr_eval], max_len=cfg.eval.max_len)
        out = report_dir / "asr_eval.jsonl"
        _write_log(out, res["records"])
        print(f"ASR eval ({name}): WER = {res['wer']:.4f} over {res['n_utterances']} utterances")
        print(f"records: {out}")
    elif task == "dst":
        from .dialog import evaluate_corpus

        mode = Mode(cfg.training.mode)
        name = slm_ckpt_name(cfg)
        _require(ckpt / name, "slm")
        bundle, _ = load_bundle(ckpt / name)
        retriever = index = rparams = None
        if mode is Mode.RESLM:
            from .retriever import load_index, load_retriever

            _require(ckpt / "retriever.slmf", "retriever")
            _require(ckpt / "index_eval.slmf", "retriever")
            retriever, _ = load_retriever(ckpt / "retriever.slmf")
            index = load_index(ckpt / "index_eval.slmf")
            cache = ex.encode_dialog_cache(corpus, corpus.train_dialogs[:20], bundle)
            sample = [c.kept_or_full for c in cache.values()]
            rparams = ex.resolve_retrieval_params(cfg, retriever, index, sample)
        report = evaluate_corpus(
            bundle, corpus.eval_dialogs, mode, corpus.vocab, corpus.synth,
            retriever=retriever, index=index, retrieval_params=rparams,
            max_len=cfg.eval.max_len, trace_path=report_dir / "dst_trace.jsonl",
        )
        summary = {
            "jga": report.jga, "wer": report.wer, "ser": report.ser,
            "n_turns": report.n_turns, "per_slot_error": report.per_slot_error,
            "mode": mode.value, "checkpoint": name,
        }
        (report_dir / "dst_eval.json").write_text(json.dumps(summary, sort_keys=True, indent=2))
        print(f"DST eval ({mode.value}, {name}): JGA={report.jga:.4f} WER={report.wer:.4f} SER={report.ser:.4f} turns={report.n_turns}")
        for slot, err in sorted(report.per_slot_error.items()):
            print(f"  slot {slot}: error {err:.4f}")
        print(f"trace: {report_dir / 'dst_trace.jsonl'}")
    elif task == "retriever":
        from .retriever import load_index, load_retriever

        _require(ckpt / "retriever.slmf", "retriever")
        _require(ckpt / "index_eval.slmf", "retriever")
        rb, _ = load_retriever(ckpt / "retriever.slmf")
        index = load_index(ckpt / "index_eval.slmf")
        cache = ex.encode_dialog_cache(corpus, corpus.eval_dialogs, rb.speech_bundle)
        queries = ex.retrieval_queries_from_dialogs(corpus.eval_dialogs, cache)
        sample = [q[0] for q in queries[:50]]
        rparams = ex.resolve_retrieval_params(cfg, rb, index, sample)
        res = ex.eval_retriever(rb, index, queries, rparams)
        _write_log(report_dir / "retriever_eval.jsonl", res["records"])
        print(f"retriever eval: threshold={rparams.sim_threshold:.4f} over {res['metrics']['n_queries']} queries")
        for k in ex.RETRIEVER_EVAL_KS:
            print(f"  R@{k}: {res['metrics'][f'R@{k}']:.4f}   P@{k}: {res['metrics'][f'P@{k}']:.4f}")
        print(f"records: {report_dir / 'retriever_eval.jsonl'}")
    else:
        return EXIT_USAGE
    return EXIT_OK


def cmd_inspect(cfg: RunConfig, checkpoint: str | None) -> int:
    if checkpoint:
        path = Path(checkpoint)
        if not path.exists():
            print(f"no such checkpoint: {path}", file=sys.stderr)
            return EXIT_IO
        digest, meta, entries = load_checkpoint(path)
        print(f"{path}: format SLMF v1, digest {digest[:16]}…")
        for key in ("stage", "step"):
            if key in meta:
                print(f"  {key}: {meta[key]}")
        frozen = meta.get("frozen", {})
        groups: dict[str, list[str]] = {}
        for name in entries:
            if name.startswith("__opt__"):
                continue
            g, _, p = name.partition("/")
            groups.setdefault(g, []).append(p)
        for g in sorted(groups):
            n_params = sum(int(entries[f"{g}/{p}"].size) for p in groups[g])
            print(f"  group {g}: {len(groups[g])} tensors, {n_params} params, frozen={frozen.get(g)}")
        return EXIT_OK
    from .experiments import load_corpus

    src = Path(cfg.paths.corpus_dir)
    if (src / "vocab.json").exists():
        corpus = load_corpus(src)
        print(f"corpus at {src}:")
        for k, v in sorted(corpus.stats().items()):
            print(f"  {k}: {v}")
    else:
        print(f"no corpus at {src}")
    ckpt = _ckpt_dir(cfg)
    if ckpt.exists():
        names = sorted(p.name for p in ckpt.glob("*.slmf"))
        print(f"checkpoints in {ckpt}: {', '.join(names) if names else '(none)'}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = _Parser(prog="slmf", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data")
    p.add_argument("--config", required=True)

    p = sub.add_parser("train")
    p.add_argument("--config", required=True)
    p.add_argument("--stage", required=True, choices=STAGES)
    p.add_argument("--dry-run", action="store_true")

    p = sub.add_parser("eval")
    p.add_argument("--config", required=True)
    p.add_argument("--task", required=True, choices=TASKS)

    p = sub.add_parser("inspect")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", default=None)

    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or EXIT_USAGE)

    cfg = _load_config(args.config)
    try:
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "train":
            return cmd_train(cfg, args.stage, dry_run=args.dry_run)
        if args.command == "eval":
            return cmd_eval(cfg, args.task)
        if args.command == "inspect":
            return cmd_inspect(cfg, args.checkpoint)
    except SystemExit as exc:
        return int(exc.code or EXIT_USAGE)
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
