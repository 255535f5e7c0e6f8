import functools

import numpy as np
import pytest

from wpnmt import cli
from wpnmt.config import ConfigError, RunConfig, parse_file, parse_overrides
from wpnmt.data import Vocabulary, read_lines
from wpnmt.decoding import greedy_decode
from wpnmt.evaluation import read_heatmap
from wpnmt.model import load_checkpoint
from wpnmt.training import tiny_gradcheck_setup

SMALL = ["--dim-emb", "8", "--dim-hid", "12", "--dim-att", "6", "--batch-size", "16",
         "--n", "64", "--valid-n", "8", "--synth-vocab", "12", "--max-epochs", "2",
         "--init-std", "0.1", "--seed", "3"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("train", "--task", "copy", "--objective", "base", "--out", root / "base", *SMALL) == 0
    assert run("train", "--task", "copy", "--objective", "L3", "--pretrain",
               root / "base" / "model.ckpt", "--out", root / "l3", *SMALL) == 0
    assert run("synth", "--task", "copy", "--n", "6", "--synth-vocab", "12", "--seed", "99",
               "--out", root / "test") == 0
    return root


def test_config_file_and_overrides(tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("# experiment\nbeam = 3\ndim_emb = 64  # trailing comment\n"
                        "ref = a.txt b.txt\neval.include-eos = true\n")
    cfg = RunConfig.from_args(["--config", str(cfg_file), "--beam", "7"])
    assert cfg["beam"] == 7 and cfg["dim-emb"] == 64
    assert cfg["ref"] == ["a.txt", "b.txt"] and cfg["eval.include-eos"] is True
    assert cfg["dim-hid"] == 1024 and cfg["vocab-size"] == 30000 and cfg["max-len"] == 50
    assert cfg["batch-size"] == 32 and cfg["dim-att"] is None
    assert "beam = 7" in cfg.lines()


def test_unknown_keys_rejected(tmp_path, capsys):
    with pytest.raises(ConfigError, match="learning-rate"):
        parse_file("learning-rate = 0.1\n")
    with pytest.raises(ConfigError, match="bogus"):
        parse_overrides(["--bogus", "1"])
    with pytest.raises(ConfigError):
        parse_overrides(["--beam", "1", "2"])
    with pytest.raises(ConfigError):
        parse_overrides(["--beam", "wide"])
    cfg_file = tmp_path / "bad.cfg"
    cfg_file.write_text("beam = 2\nwarmup = 4000\n")
    assert run("train", "--config", cfg_file) == 2
    assert "warmup" in capsys.readouterr().err


def test_unknown_command_and_help(capsys):
    assert run("fly") == 2
    assert run("--help") == 0
    assert "predict-vocab" in capsys.readouterr().out


def test_synth_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert run("synth", "--task", "reverse", "--n", "100", "--seed", "7", "--out", tmp_path / name) == 0
    for ext in (".src", ".tgt"):
        assert (tmp_path / ("a" + ext)).read_bytes() == (tmp_path / ("b" + ext)).read_bytes()
    assert run("synth", "--task", "copy", "--n", "3", "--out", tmp_path / "new" / "dir" / "c") == 0
    assert len(read_lines(tmp_path / "new" / "dir" / "c.src")) == 3
    src, tgt = read_lines(tmp_path / "a.src"), read_lines(tmp_path / "a.tgt")
    assert len(src) == 100 and all(t == s[::-1] for s, t in zip(src, tgt))


def test_train_outputs(trained):
    base = trained / "base"
    for name in ("model.ckpt", "epoch001.ckpt", "loss.log", "src.vocab", "tgt.vocab", "config.txt"):
        assert (base / name).exists()
    assert len((base / "loss.log").read_text().splitlines()) == 2
    assert "objective = base" in (base / "config.txt").read_text()


def test_pretrained_l3_has_superset_of_names(trained):
    b = load_checkpoint(trained / "base" / "model.ckpt")
    l3 = load_checkpoint(trained / "l3" / "model.ckpt")
    assert set(b.names()) < set(l3.names())
    assert l3.has_wpe and l3.has_wpd


def test_train_refuses_to_clobber(trained, capsys):
    assert run("train", "--task", "copy", "--out", trained / "base", *SMALL) == 1
    assert "already" in capsys.readouterr().err


def test_train_from_files(tmp_path, trained):
    src = trained / "test.src"
    tgt = trained / "test.tgt"
    args = ["--train-src", src, "--train-tgt", tgt, "--valid-src", src, "--valid-tgt", tgt,
            "--dim-emb", "4", "--dim-hid", "4", "--max-epochs", "1"]
    assert run("train", *args, "--out", tmp_path / "f") == 0
    assert run("train", "--train-src", tmp_path / "missing", "--train-tgt", tgt,
               "--out", tmp_path / "g") == 1


def _translate(trained, model, *extra, name="hyp.txt"):
    out = trained / name
    rc = run("translate", "--checkpoint", trained / model / "model.ckpt", "--input",
             trained / "test.src", "--output", out, "--timing", trained / "timing.tsv", *extra)
    assert rc == 0
    return out.read_text()


def test_translate_beam_one_is_greedy(trained):
    text = _translate(trained, "base", "--beam", "1")
    model = load_checkpoint(trained / "base" / "model.ckpt")
    sv = Vocabulary.load(trained / "base" / "src.vocab")
    tv = Vocabulary.load(trained / "base" / "tgt.vocab")
    expect = []
    for toks in read_lines(trained / "test.src"):
        ids = greedy_decode(model, sv.encode(toks)).tokens
        expect.append(" ".join(tv.decode([i for i in ids if i != 3])))
    assert text.splitlines() == expect
    fields = (trained / "timing.tsv").read_text().split("\t")
    assert fields[0] == "6" and fields[3].strip() == "-"


def test_translate_full_vocab_n_and_ensemble_match_plain(trained):
    plain = _translate(trained, "l3", name="plain.txt")
    full = _translate(trained, "l3", "--vocab-n", "30000", name="full.txt")
    assert plain == full
    ck = trained / "l3" / "model.ckpt"
    assert run("translate", "--ensemble", ck, ck, "--input", trained / "test.src",
               "--output", trained / "ens.txt") == 0
    assert (trained / "ens.txt").read_text() == plain


def test_translate_vocab_mismatch(trained, capsys):
    rc = run("translate", "--checkpoint", trained / "base" / "model.ckpt", "--input",
             trained / "test.src", "--tgt-vocab", trained / "base" / "config.txt")
    assert rc == 1
    assert capsys.readouterr().err.startswith("error:")


def test_translate_vocab_n_needs_wpe(trained):
    assert run("translate", "--checkpoint", trained / "base" / "model.ckpt", "--input",
               trained / "test.src", "--vocab-n", "5") == 1


def test_translate_heatmaps(trained, tmp_path):
    _translate(trained, "base", "--heatmap", tmp_path / "hm", "--beam", "2")
    header, labels, values = read_heatmap(tmp_path / "hm" / "decode00001.tsv")
    assert header == read_lines(trained / "test.src")[0]
    np.testing.assert_allclose(values.sum(1), 1, atol=1e-5)


def test_predict_vocab(trained, tmp_path):
    out = tmp_path / "pv.txt"
    assert run("predict-vocab", "--checkpoint", trained / "l3" / "model.ckpt", "--input",
               trained / "test.src", "--vocab-n", "5", "--output", out,
               "--heatmap", tmp_path / "hm") == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 6 and all(len(ln.split()) == 5 for ln in lines)
    _, labels, values = read_heatmap(tmp_path / "hm" / "wpe00001.tsv")
    assert labels == ["s0"] and abs(values.sum() - 1) < 1e-5
    assert run("predict-vocab", "--checkpoint", trained / "base" / "model.ckpt", "--input",
               trained / "test.src", "--vocab-n", "5") == 1


def test_evaluate(trained, capsys):
    tgt = trained / "test.tgt"
    assert run("evaluate", "--hyp", tgt, "--ref", tgt) == 0
    out = capsys.readouterr().out
    assert "bleu\t100.0000" in out and "token_accuracy\t1.000000" in out
    assert run("evaluate", "--hyp", tgt, "--ref", tgt, tgt, "--checkpoint",
               trained / "l3" / "model.ckpt", "--input", trained / "test.src",
               "--top-n", "1", "5", "12", "--eval.include-eos", "true") == 0
    out = capsys.readouterr().out
    assert "top-12.recall\t100.00" in out and "token_accuracy" not in out
    assert run("evaluate", "--hyp", tgt, "--ref", trained / "test.src" / "nope") == 1


def test_gradcheck_command(monkeypatch, capsys):
    small = functools.partial(tiny_gradcheck_setup, n_pairs=2, vocab=6, dim_emb=3, dim_hid=3,
                              dim_att=2, max_len=3)
    monkeypatch.setattr(cli, "tiny_gradcheck_setup", small)
    assert run("gradcheck", "--seed", "1") == 0
    out = capsys.readouterr().out
    assert out.splitlines()[-1].startswith("PASS")
    assert run("gradcheck", "--seed", "1", "--tolerance", "1e-30") == 1
