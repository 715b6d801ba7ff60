import pytest
from loguru import logger

from am import load_model, save_model
from lexicon import load_lexicon, write_lexicon, write_phone_table
from lm import read_arpa
from singalign import main


@pytest.fixture(autouse=True)
def _drop_cli_sinks():
    yield
    logger.remove()


@pytest.fixture
def lyrics(tmp_path):
    path = tmp_path / "lyrics.txt"
    path.write_text("la la love\n[chorus]\nlove me la\nme la love la\n", encoding="utf-8")
    return path


def test_lm_train_and_ppl(tmp_path, lyrics, capsys):
    arpa, normalized = tmp_path / "lm.arpa", tmp_path / "corpus.txt"
    assert main(["lm", "train", "--text", str(lyrics), "--out", str(arpa), "--corpus-out", str(normalized)]) == 0
    assert read_arpa(arpa).order == 3
    assert normalized.read_text(encoding="utf-8").splitlines()[0] == "LA LA LOVE"
    assert main(["lm", "ppl", "--lm", str(arpa), "--text", str(lyrics)]) == 0
    raw = capsys.readouterr().out
    assert raw.startswith("ppl ")
    assert main(["lm", "ppl", "--lm", str(arpa), "--text", str(normalized), "--normalized"]) == 0
    assert capsys.readouterr().out == raw
    pruned = tmp_path / "pruned.arpa"
    assert main(["lm", "prune", "--lm", str(arpa), "--threshold", "0.01", "--out", str(pruned)]) == 0
    assert pruned.exists()


def test_score_command(tmp_path, capsys):
    ref, hyp = tmp_path / "ref.txt", tmp_path / "hyp.txt"
    ref.write_text("u1 a b\nu2 c d e f g h i j\n", encoding="utf-8")
    hyp.write_text("u1 a x\nu2 c d e f g h i j\n", encoding="utf-8")
    assert main(["score", "--ref", str(ref), "--hyp", str(hyp), "--out", str(tmp_path / "score")]) == 0
    assert "WER 10.00% (1/10)" in capsys.readouterr().out
    assert (tmp_path / "score" / "summary.tsv").exists()


def test_validation_errors_exit_with_one(tmp_path):
    ref, hyp = tmp_path / "ref.txt", tmp_path / "hyp.txt"
    ref.write_text("u1 a\nu2 b\n", encoding="utf-8")
    hyp.write_text("u1 a\n", encoding="utf-8")
    assert main(["score", "--ref", str(ref), "--hyp", str(hyp)]) == 1
    assert main(["score", "--ref", str(ref), "--hyp", str(ref), "--per-genre"]) == 1
    assert main(["run", str(tmp_path / "missing.ini")]) == 1


def test_usage_errors_exit_with_one(capsys):
    with pytest.raises(SystemExit) as info:
        main([])
    assert info.value.code == 1
    with pytest.raises(SystemExit) as info:
        main(["lm", "train", "--text", "x"])
    assert info.value.code == 1
    assert "the following arguments are required: --out" in capsys.readouterr().err


def test_file_system_errors_map_to_exit_codes(tmp_path, lyrics):
    missing = tmp_path / "missing.arpa"
    assert main(["lm", "ppl", "--lm", str(missing), "--text", str(lyrics)]) == 1
    arpa = tmp_path / "lm.arpa"
    assert main(["lm", "train", "--text", str(lyrics), "--out", str(arpa)]) == 0
    blocked = tmp_path / "blocked"
    blocked.write_text("", encoding="utf-8")
    assert main(["lm", "prune", "--lm", str(arpa), "--threshold", "0", "--out", str(blocked / "out.arpa")]) == 2


def test_lexicon_extend(tmp_path, phones, lexicon):
    table = write_phone_table(phones, tmp_path / "phones.txt")
    source = write_lexicon(lexicon, tmp_path / "lexicon.txt")
    out = tmp_path / "extended.txt"
    argv = ["lexicon", "extend", "--lexicon", str(source), "--phones", str(table), "--max-vowels", "2"]
    assert main(argv + ["--out", str(out)]) == 0
    extended = load_lexicon(out, table)
    assert len(extended) == len(lexicon)
    assert sum(len(extended[w]) for w in extended.words()) == 4 * len(lexicon)


def test_am_scale_loops(tmp_path, model):
    source = save_model(model, tmp_path / "in.mdl")
    out = tmp_path / "out.mdl"
    assert main(["am", "scale-loops", "--model", str(source), "--r", "0.5", "--out", str(out)]) == 0
    scaled = load_model(out)
    vowel = next(s for s, p in model.phones.items() if p.is_vowel)
    consonant = next(s for s, p in model.phones.items() if not p.is_vowel and not p.is_silence)
    assert scaled.forward[vowel][0] == pytest.approx(0.5 * model.forward[vowel][0])
    assert scaled.forward[consonant][0] == pytest.approx(model.forward[consonant][0])


def test_synth_writes_a_runnable_layout(tmp_path, capsys):
    assert main(["synth", str(tmp_path / "corpus"), "--vocabulary", "6"]) == 0
    config = capsys.readouterr().out.strip()
    assert config.endswith("experiment.ini")
    for name in ("manifest.tsv", "lexicon.txt", "phones.txt", "lyrics.txt"):
        assert (tmp_path / "corpus" / name).exists()


def test_am_dump(tmp_path, model, capsys):
    source = save_model(model, tmp_path / "in.mdl")
    assert main(["am", "dump", "--model", str(source)]) == 0
    assert capsys.readouterr().out.startswith("singalign-am ")
