"""Command-line entry point: train, translate, evaluate, predict-vocab, gradcheck, synth."""

from __future__ import annotations

import io
import logging
import os
import sys
import time
from contextlib import contextmanager
from typing import Optional, Sequence

from .config import KEYS, ConfigError, RunConfig
from .data import (EOS, Vocabulary, build_vocab, encode_pair, gen_synthetic, load_parallel,
                   read_lines, write_lines)
from .decoding import TimingReport, Timer, VocabMask, beam_search, strip_eos
from .evaluation import (EvalReport, bleu, export_heatmap, reference_set, token_accuracy,
                         wp_precision_recall)
from .model import ModelParams, encode, load_checkpoint
from .training import OBJECTIVES, TrainingConfig, check_gradients, tiny_gradcheck_setup, train
from .word_prediction import predict_vocabulary, rank_vocabulary, wpe_context, wpe_distribution

log = logging.getLogger("wpnmt")

_NO_LIMIT = 10 ** 9  # vocabulary files are trusted to match their checkpoint

COMMANDS = ("train", "translate", "evaluate", "predict-vocab", "gradcheck", "synth")


class CommandError(RuntimeError):
    pass


@contextmanager
def _output(path: Optional[str]):
    if path is None:
        yield sys.stdout
    else:
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        with io.open(path, "w", encoding="utf-8", newline="\n") as f:
            yield f


def _require(cfg: RunConfig, *names: str) -> None:
    missing = [n for n in names if cfg[n] in (None, [])]
    if missing:
        raise CommandError("missing required setting(s): " + ", ".join("--" + n for n in missing))


def _exists(path: str) -> str:
    if not os.path.exists(path):
        raise CommandError(f"no such file: {path}")
    return path


# ---------------------------------------------------------------------------
# synth / train


def _synthetic_split(cfg: RunConfig):
    task = cfg["task"]
    pairs = gen_synthetic(task, cfg["n"] + cfg["valid-n"], cfg["synth-vocab"],
                          (cfg["len-min"], cfg["len-max"]), seed=cfg["seed"])
    return pairs[: cfg["n"]], pairs[cfg["n"]:]


def cmd_synth(cfg: RunConfig) -> int:
    _require(cfg, "task")
    pairs = gen_synthetic(cfg["task"], cfg["n"], cfg["synth-vocab"],
                          (cfg["len-min"], cfg["len-max"]), seed=cfg["seed"])
    prefix = cfg["out"]
    write_lines(prefix + ".src", [x for x, _ in pairs])
    write_lines(prefix + ".tgt", [y for _, y in pairs])
    log.info("wrote %d pairs to %s.src / %s.tgt", len(pairs), prefix, prefix)
    return 0


def training_config(cfg: RunConfig) -> TrainingConfig:
    if cfg["objective"] not in OBJECTIVES:
        raise ConfigError(f"objective must be one of {OBJECTIVES}, got {cfg['objective']!r}")
    return TrainingConfig(
        objective=cfg["objective"], batch_size=cfg["batch-size"], max_epochs=cfg["max-epochs"],
        seed=cfg["seed"], dropout=cfg["dropout"], clip=cfg["clip"], rho=cfg["rho"],
        eps=cfg["eps"], patience=cfg["patience"], max_len=cfg["max-len"],
        pretrain=cfg["pretrain"], finetune_all=cfg["finetune-all"], init_std=cfg["init-std"],
        dim_emb=cfg["dim-emb"], dim_hid=cfg["dim-hid"], dim_att=cfg["dim-att"],
        dim_readout=cfg["dim-readout"])


def _load_training_text(cfg: RunConfig):
    if cfg["task"]:
        return _synthetic_split(cfg)
    _require(cfg, "train-src", "train-tgt")
    train_text = load_parallel(_exists(cfg["train-src"]), _exists(cfg["train-tgt"]))
    valid_text = []
    if cfg["valid-src"] or cfg["valid-tgt"]:
        _require(cfg, "valid-src", "valid-tgt")
        valid_text = load_parallel(_exists(cfg["valid-src"]), _exists(cfg["valid-tgt"]))
    return train_text, valid_text


def _vocabularies(cfg: RunConfig, train_text):
    if cfg["pretrain"]:
        # a fine-tuned model has to keep the pretrained model's vocabularies
        base = os.path.dirname(cfg["pretrain"])
        src_v = Vocabulary.load(_exists(os.path.join(base, "src.vocab")), _NO_LIMIT)
        tgt_v = Vocabulary.load(_exists(os.path.join(base, "tgt.vocab")), _NO_LIMIT)
        return src_v, tgt_v
    return (build_vocab([x for x, _ in train_text], cfg["vocab-size"]),
            build_vocab([y for _, y in train_text], cfg["vocab-size"]))


def cmd_train(cfg: RunConfig) -> int:
    tcfg = training_config(cfg)
    if cfg["pretrain"]:
        _exists(cfg["pretrain"])
    train_text, valid_text = _load_training_text(cfg)
    if not train_text:
        raise CommandError("training data is empty")
    src_v, tgt_v = _vocabularies(cfg, train_text)
    train_pairs = [encode_pair(src_v, tgt_v, x, y) for x, y in train_text if x]
    valid_pairs = [encode_pair(src_v, tgt_v, x, y) for x, y in valid_text if x]
    out = cfg["out"]
    result = train(tcfg, train_pairs, len(src_v), len(tgt_v), valid_pairs, out_dir=out,
                   overwrite=cfg["overwrite"])
    src_v.save(os.path.join(out, "src.vocab"))
    tgt_v.save(os.path.join(out, "tgt.vocab"))
    with io.open(os.path.join(out, "config.txt"), "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(cfg.lines()) + "\n")
    last = result.log[-1]
    log.info("trained %d epochs; final L_T %.4f; best validation L_T %s", len(result.log),
             last.l_t, "-" if result.best_val is None else f"{result.best_val:.4f}")
    return 0


# ---------------------------------------------------------------------------
# model loading


def _model_paths(cfg: RunConfig) -> list[str]:
    paths = list(cfg["ensemble"]) or ([cfg["checkpoint"]] if cfg["checkpoint"] else [])
    if not paths:
        raise CommandError("missing required setting: --checkpoint (or --ensemble)")
    return [_exists(p) for p in paths]


def load_models(cfg: RunConfig) -> tuple[list[ModelParams], Vocabulary, Vocabulary]:
    paths = _model_paths(cfg)
    base = os.path.dirname(paths[0])
    src_path = cfg["src-vocab"] or os.path.join(base, "src.vocab")
    tgt_path = cfg["tgt-vocab"] or os.path.join(base, "tgt.vocab")
    src_v = Vocabulary.load(_exists(src_path), _NO_LIMIT)
    tgt_v = Vocabulary.load(_exists(tgt_path), _NO_LIMIT)
    models = []
    for p in paths:
        m = load_checkpoint(p)
        got = (m.config.src_vocab_size, m.config.tgt_vocab_size)
        if got != (len(src_v), len(tgt_v)):
            raise CommandError(f"{p} expects vocabularies of size {got} but the vocabulary files "
                               f"have ({len(src_v)}, {len(tgt_v)})")
        models.append(m)
    return models, src_v, tgt_v


def _source_ids(cfg: RunConfig, src_v: Vocabulary) -> list[list[int]]:
    _require(cfg, "input")
    lines = read_lines(_exists(cfg["input"]))
    if any(not toks for toks in lines):
        raise CommandError(f"{cfg['input']} contains an empty line")
    return [src_v.encode(toks) for toks in lines]


# ---------------------------------------------------------------------------
# translate / predict-vocab


def cmd_translate(cfg: RunConfig) -> int:
    models, src_v, tgt_v = load_models(cfg)
    sentences = _source_ids(cfg, src_v)
    primary = models[0]
    if cfg["vocab-n"] is not None and not primary.has_wpe:
        raise CommandError("--vocab-n needs a checkpoint with a wpe head")
    if cfg["heatmap"]:
        os.makedirs(cfg["heatmap"], exist_ok=True)
    timer = Timer()
    t0 = time.perf_counter()
    outputs = []
    for i, src in enumerate(sentences):
        mask = None
        if cfg["vocab-n"] is not None:
            allowed = predict_vocabulary(primary, encode(primary, [src]), cfg["vocab-n"])
            mask = VocabMask(allowed, primary.config.tgt_vocab_size)
        res = beam_search(models, src, cfg["beam"], cfg["decode-max-len"], mask, timer,
                          return_attention=bool(cfg["heatmap"]))
        if not res.finished:
            log.warning("sentence %d: no hypothesis reached EOS", i + 1)
        outputs.append(tgt_v.decode(strip_eos(res.tokens)))
        if cfg["heatmap"]:
            labels = tgt_v.decode(res.tokens)
            export_heatmap(res.attention, src_v.decode(src), labels,
                           os.path.join(cfg["heatmap"], f"decode{i + 1:05d}.tsv"))
    total = time.perf_counter() - t0
    with _output(cfg["output"]) as f:
        for toks in outputs:
            f.write(" ".join(toks) + "\n")
    report = TimingReport(len(sentences), total * 1e3, timer.output_proj * 1e3, cfg["vocab-n"])
    if cfg["timing"]:
        with io.open(cfg["timing"], "w", encoding="utf-8", newline="\n") as f:
            f.write(report.line() + "\n")
    else:
        sys.stderr.write(report.line() + "\n")
    return 0


def _wpe_rankings(model: ModelParams, sentences):
    for src in sentences:
        enc = encode(model, [src])
        yield enc, rank_vocabulary(wpe_distribution(model, enc).data[0])


def cmd_predict_vocab(cfg: RunConfig) -> int:
    models, src_v, tgt_v = load_models(cfg)
    model = models[0]
    if not model.has_wpe:
        raise CommandError("predict-vocab needs a checkpoint with a wpe head")
    _require(cfg, "vocab-n")
    n = cfg["vocab-n"]
    if n < 1:
        raise CommandError("--vocab-n must be >= 1")
    sentences = _source_ids(cfg, src_v)
    if cfg["heatmap"]:
        os.makedirs(cfg["heatmap"], exist_ok=True)
    with _output(cfg["output"]) as f:
        for i, (enc, ranked) in enumerate(_wpe_rankings(model, sentences)):
            f.write(" ".join(str(int(t)) for t in ranked[:n]) + "\n")
            if cfg["heatmap"]:
                a = wpe_context(model, enc).a.data
                export_heatmap(a, src_v.decode(sentences[i]), ["s0"],
                               os.path.join(cfg["heatmap"], f"wpe{i + 1:05d}.tsv"))
    return 0


# ---------------------------------------------------------------------------
# evaluate


def cmd_evaluate(cfg: RunConfig) -> int:
    _require(cfg, "hyp", "ref")
    hyps = read_lines(_exists(cfg["hyp"]))
    ref_files = [read_lines(_exists(p)) for p in cfg["ref"]]
    if any(len(r) != len(hyps) for r in ref_files):
        raise CommandError("hypothesis and reference files differ in line count")
    refs = [list(rs) for rs in zip(*ref_files)]
    report = EvalReport(bleu(hyps, refs))
    if len(ref_files) == 1:
        report.token_accuracy = token_accuracy(hyps, ref_files[0])
    if cfg["checkpoint"] or cfg["ensemble"]:
        models, src_v, tgt_v = load_models(cfg)
        if not models[0].has_wpe:
            raise CommandError("word-prediction metrics need a checkpoint with a wpe head")
        sentences = _source_ids(cfg, src_v)
        if len(sentences) != len(hyps):
            raise CommandError("--input and --hyp differ in line count")
        top = max(cfg["top-n"])
        rankings = [tgt_v.decode(r[:top].tolist()) for _, r in _wpe_rankings(models[0], sentences)]
        include_eos = cfg["eval.include-eos"]
        references = []
        for rs in refs:
            R = reference_set(rs)
            if include_eos:
                R.add(tgt_v.tokens[EOS])
            references.append(R)
        report.prediction = wp_precision_recall(rankings, references, cfg["top-n"])
    with _output(cfg["output"]) as f:
        report.write(f)
    return 0


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(cfg: RunConfig) -> int:
    t0 = time.perf_counter()
    params, batch = tiny_gradcheck_setup(seed=cfg["seed"])
    report = check_gradients(params, batch)
    worst = 0.0
    for obj, per_tensor in report.items():
        name, err = max(per_tensor.items(), key=lambda kv: kv[1])
        worst = max(worst, err)
        print(f"{obj}\tmax_rel_err\t{err:.3e}\t{name}")
    ok = worst < cfg["tolerance"]
    print(f"{'PASS' if ok else 'FAIL'}\t{worst:.3e}\t{time.perf_counter() - t0:.1f}s")
    return 0 if ok else 1


# ---------------------------------------------------------------------------


HANDLERS = {"train": cmd_train, "translate": cmd_translate, "evaluate": cmd_evaluate,
            "predict-vocab": cmd_predict_vocab, "gradcheck": cmd_gradcheck, "synth": cmd_synth}


def usage() -> str:
    lines = ["usage: wpnmt <command> [--config FILE] [--key value ...]", "",
             "commands: " + ", ".join(COMMANDS), "", "settings:"]
    for name, key in KEYS.items():
        default = " ".join(map(str, key.default)) if key.many else key.default
        extra = f"  {key.help}" if key.help else ""
        lines.append(f"  --{name} (default {default}){extra}")
    return "\n".join(lines)


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] in ("-h", "--help", "help"):
        print(usage())
        return 0 if argv else 2
    command, rest = argv[0], argv[1:]
    if command not in HANDLERS:
        sys.stderr.write(f"error: unknown command {command!r}; expected one of {', '.join(COMMANDS)}\n")
        return 2
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s",
                            stream=sys.stderr)
    try:
        cfg = RunConfig.from_args(rest)
    except (ConfigError, OSError) as e:
        sys.stderr.write(f"error: {e}\n")
        return 2
    log.info("resolved config for %s:\n  %s", command, "\n  ".join(cfg.lines()))
    try:
        return HANDLERS[command](cfg)
    except (ConfigError, CommandError, FileExistsError, FloatingPointError, ValueError,
            KeyError, IndexError, OSError) as e:
        sys.stderr.write(f"error: {e}\n")
        return 1
