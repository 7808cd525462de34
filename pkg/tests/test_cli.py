import json

import pytest

from cptr.cli import main
from cptr.errors import SpecError
from cptr.harness.checkpoint import load_checkpoint
from cptr.harness.configfile import build_config, load_config, parse_config_text

SMALL = """\
# tiny desk run
vocab_size = 16
d_model = 8
n_heads = 2
n_layers = 1
d_ff = 8
max_seq_len = 12
n_pairs = 2
distances = 4, 8   # two buckets
n_eval_per_distance = 16
batch_size = 4
latency_batch_sizes = 1, 2
latency_tokens = 2
latency_repeats = 1
latency_prompt_len = 2
cptr_ranks = 4, 2, 2
"""


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "small.cfg"
    p.write_text(SMALL)
    return str(p)


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


class TestConfigFile:
    def test_parse(self, cfg_path):
        exp = load_config(cfg_path)
        assert exp.distances == (4, 8) and exp.model.d_model == 8 and exp.cptr_ranks is None
        assert exp.model.cptr_ranks == (4, 2, 2)

    def test_values(self):
        s = parse_config_text("cptr_enabled = on\nlr = 1e-2\ncptr_ranks = none\n\n# c\n")
        assert s == {"cptr_enabled": True, "lr": 0.01, "cptr_ranks": None}

    def test_seed_propagates(self):
        exp = build_config({"seed": 9})
        assert exp.seed == 9 and exp.model.seed == 9

    @pytest.mark.parametrize("text", ["bogus = 1", "steps 5", "steps = five", "cptr_enabled = maybe"])
    def test_errors(self, text):
        with pytest.raises(SpecError):
            parse_config_text(text)


def test_gen_data(capsys, cfg_path):
    code, out, _ = run(capsys, "gen-data", "--config", cfg_path, "--seed", "3")
    assert code == 0
    rows = [json.loads(x) for x in out.splitlines()]
    assert len(rows) == 32 and {r["distance"] for r in rows} == {4, 8}
    assert all(len(r["tokens"]) == 13 for r in rows)
    code, again, _ = run(capsys, "gen-data", "--config", cfg_path, "--seed", "3")
    assert again == out


@pytest.mark.parametrize("cptr", ["off", "on"])
def test_train_eval_bench(capsys, cfg_path, tmp_path, cptr):
    ckpt = str(tmp_path / "m.ckpt")
    code, out, err = run(capsys, "train", "--config", cfg_path, "--steps", "3", "--cptr", cptr, "--checkpoint", ckpt)
    assert code == 0, err
    report = json.loads(out)["reports"][0]
    assert report["model"] == ("cptr" if cptr == "on" else "baseline")
    assert report["train_steps"] == 3 and report["status"] == "ok"
    loaded = load_checkpoint(ckpt)
    assert loaded.step == 3 and loaded.config.cptr_enabled == (cptr == "on")

    code, out, err = run(capsys, "eval", "--config", cfg_path, "--checkpoint", ckpt, "--format", "csv")
    assert code == 0, err
    assert out.splitlines()[0].startswith("run_id,model")

    out_path = tmp_path / "bench.md"
    code, _, err = run(capsys, "bench", "--config", cfg_path, "--checkpoint", ckpt, "--format", "markdown",
                       "--out", str(out_path))
    assert code == 0, err
    assert "Batch Size 2" in out_path.read_text()


def test_ranks_flag(capsys, cfg_path, tmp_path):
    ckpt = str(tmp_path / "r.ckpt")
    code, _, err = run(capsys, "train", "--config", cfg_path, "--steps", "1", "--cptr", "on", "--ranks", "2,1,2",
                       "--checkpoint", ckpt)
    assert code == 0, err
    assert load_checkpoint(ckpt).config.cptr_ranks == (2, 1, 2)


def test_compare(capsys, cfg_path):
    code, out, err = run(capsys, "compare", "--config", cfg_path, "--steps", "2", "--format", "json")
    assert code == 0, err
    doc = json.loads(out)
    assert [r["model"] for r in doc["reports"]] == ["baseline", "cptr"]
    assert doc["reports"][0]["stream_hash"] == doc["reports"][1]["stream_hash"]
    assert "perplexity" in doc["trends"]


@pytest.mark.parametrize("argv, name", [
    (["eval", "--checkpoint", "/nonexistent/file"], "FileNotFoundError"),
    (["train", "--steps", "1", "--cptr", "on", "--ranks", "99,1,1"], None),
])
def test_error_exit(capsys, argv, name):
    code, out, err = run(capsys, *argv)
    assert code != 0 and out == ""
    line = json.loads(err.strip().splitlines()[-1])
    assert set(line) == {"error", "message"}
    if name:
        assert line["error"] == name


def test_corrupt_checkpoint_exit(capsys, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOPE" + b"\0" * 20)
    code, _, err = run(capsys, "eval", "--checkpoint", str(bad))
    assert code == 1 and json.loads(err)["error"] == "BadMagicError"


def test_bad_config_exit(capsys, tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("unknown_key = 3\n")
    code, _, err = run(capsys, "gen-data", "--config", str(p))
    assert code == 1 and json.loads(err)["error"] == "SpecError"
