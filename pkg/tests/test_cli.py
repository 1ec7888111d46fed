import json

import pytest

from abcscale import synthetic
from abcscale.abc_parser import join_tunebook
from abcscale.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, dumps, main
from abcscale.fitting import write_observations


@pytest.fixture
def tunebook(tmp_path):
    path = tmp_path / "in.abc"
    path.write_text(join_tunebook(synthetic.mixed_corpus(3, 40, 2)))
    return path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


class TestConvert:
    def test_report_counts_skips(self, capsys, tunebook, tmp_path):
        code, out, _ = run(capsys, "convert", "--input", tunebook, "--output", tmp_path / "out.abc")
        assert code == EXIT_OK
        report = json.loads(out)
        assert report["skipped"] == 2
        assert (tmp_path / "out.abc").read_text().count("<|>") > 0

    def test_round_trip_through_invert(self, capsys, tmp_path):
        src = tmp_path / "in.abc"
        src.write_text(join_tunebook(synthetic.aligned_corpus(4, 10)))
        assert run(capsys, "convert", "--input", src, "--output", tmp_path / "s.abc")[0] == EXIT_OK
        code, _, _ = run(capsys, "--quiet", "convert", "--invert", "--input", tmp_path / "s.abc",
                         "--output", tmp_path / "back.abc")
        assert code == EXIT_OK
        assert (tmp_path / "back.abc").read_text().count("X:") == 10

    def test_reruns_are_byte_identical(self, capsys, tunebook, tmp_path):
        run(capsys, "convert", "--input", tunebook, "--output", tmp_path / "a.abc", "--report", tmp_path / "a.json")
        run(capsys, "convert", "--input", tunebook, "--output", tmp_path / "b.abc", "--report", tmp_path / "b.json")
        assert (tmp_path / "a.abc").read_bytes() == (tmp_path / "b.abc").read_bytes()
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_missing_file_is_data_error(self, capsys, tmp_path):
        code, _, err = run(capsys, "convert", "--input", tmp_path / "nope.abc", "--output", tmp_path / "o")
        assert code == EXIT_DATA and "nope.abc" in err


class TestTokenize:
    def test_train_encode_decode(self, capsys, tmp_path):
        text = tmp_path / "lines.txt"
        text.write_text("\n".join(synthetic.corpus_lines(0, 200)) + "\n")
        vocab = tmp_path / "vocab.json"
        assert run(capsys, "--quiet", "tokenize", "train", "--vocab", vocab, "--vocab-size", 120,
                   "--input", text)[0] == EXIT_OK
        assert run(capsys, "tokenize", "encode", "--vocab", vocab, "--input", text,
                   "--output", tmp_path / "ids.txt")[0] == EXIT_OK
        code, out, _ = run(capsys, "tokenize", "decode", "--vocab", vocab, "--input", tmp_path / "ids.txt")
        assert code == EXIT_OK
        assert out == text.read_text()

    def test_bad_id_is_data_error(self, capsys, tmp_path):
        text = tmp_path / "lines.txt"
        text.write_text("abc\n")
        vocab = tmp_path / "vocab.json"
        run(capsys, "tokenize", "train", "--vocab", vocab, "--vocab-size", 10, "--input", text)
        ids = tmp_path / "ids.txt"
        ids.write_text("1 x 2\n")
        assert run(capsys, "tokenize", "decode", "--vocab", vocab, "--input", ids)[0] == EXIT_DATA


class TestStats:
    def test_json_and_histogram(self, capsys, tmp_path):
        book = tmp_path / "b.abc"
        book.write_text(join_tunebook(synthetic.pieces_with_repeats(0, 50, 20)))
        hist = tmp_path / "h.csv"
        code, out, _ = run(capsys, "stats", "--input", book, "--context-length", 100, "--histogram", hist)
        assert code == EXIT_OK
        report = json.loads(out)
        assert report["repetition_rate"] == pytest.approx(0.4, abs=1e-15)
        assert report["length_unit"] == "characters"
        assert hist.read_text().startswith("lo,hi,count\n")

    def test_csv_output(self, capsys, tmp_path):
        book = tmp_path / "b.abc"
        book.write_text(join_tunebook(synthetic.pieces_with_repeats(0, 10, 5)))
        code, out, _ = run(capsys, "--output-format", "csv", "stats", "--input", book)
        assert code == EXIT_OK
        header, values = out.strip().split("\n")
        assert "repetition_rate" in header.split(",")


class TestFitPredictOptimal:
    @pytest.fixture
    def params_file(self, capsys, tmp_path):
        log = tmp_path / "log.jsonl"
        write_observations(log, synthetic.chinchilla_observations(0))
        out = tmp_path / "fit.json"
        code, _, _ = run(capsys, "fit", "--law", "chinchilla", "--input", log, "--out", out)
        assert code == EXIT_OK
        params = tmp_path / "params.json"
        params.write_text(json.dumps(json.loads(out.read_text())["params"]))
        return params

    def test_fit_report_fields(self, params_file, tmp_path):
        report = json.loads((tmp_path / "fit.json").read_text())
        assert report["n_test"] == 12
        assert report["objective_trace"][-1] <= report["objective_trace"][0]

    def test_predict(self, capsys, params_file):
        code, out, _ = run(capsys, "predict", "--params", params_file, "--n", 1e9, "--d", 1e10)
        assert code == EXIT_OK
        assert 1.7 < json.loads(out)["loss"] < 3.0

    def test_optimal_and_sweep(self, capsys, params_file):
        code, out, _ = run(capsys, "optimal", "--params", params_file, "--flops", 1e21)
        assert code == EXIT_OK
        res = json.loads(out)
        assert 6 * res["n_opt"] * res["d_opt"] == pytest.approx(1e21, rel=1e-12)
        code, out, _ = run(capsys, "optimal", "--params", params_file, "--flops", 1e21, "--sweep")
        assert code == EXIT_OK and out.startswith("n,d,loss\n")

    def test_predict_needs_unique_tokens(self, capsys, tmp_path):
        params = tmp_path / "p.json"
        params.write_text(json.dumps(synthetic.SMS_FIXTURE.to_json(), default=str))
        code, _, err = run(capsys, "predict", "--params", params, "--n", 1e9, "--d", 1e10)
        assert code == EXIT_DATA

    def test_fit_sms_on_fixture(self, capsys, tmp_path):
        log = tmp_path / "sms.jsonl"
        write_observations(log, synthetic.sms_observations(0))
        code, out, _ = run(capsys, "fit", "--law", "sms", "--input", log)
        assert code == EXIT_OK
        report = json.loads(out)
        assert report["n_overfit_points"] > 0
        assert report["test_r2"] > 0.99

    def test_fit_bad_log_is_data_error(self, capsys, tmp_path):
        log = tmp_path / "bad.jsonl"
        log.write_text("not json\n")
        assert run(capsys, "fit", "--law", "nd", "--input", log)[0] == EXIT_DATA


class TestUsage:
    def test_unknown_subcommand(self, capsys):
        assert run(capsys, "frobnicate")[0] == EXIT_USAGE

    def test_missing_required_flag(self, capsys):
        assert run(capsys, "fit", "--law", "sms")[0] == EXIT_USAGE

    def test_bad_choice(self, capsys, tmp_path):
        assert run(capsys, "fit", "--law", "cubic", "--input", tmp_path / "x")[0] == EXIT_USAGE

    def test_help(self, capsys):
        assert run(capsys, "--help")[0] == EXIT_OK

    def test_global_flag_before_and_after_subcommand(self, capsys, tmp_path):
        book = tmp_path / "b.abc"
        book.write_text(join_tunebook(synthetic.pieces_with_repeats(0, 5, 1)))
        before = run(capsys, "--output-format", "csv", "stats", "--input", book)[1]
        after = run(capsys, "stats", "--input", book, "--output-format", "csv")[1]
        assert before == after and not before.startswith("{")


class TestDumps:
    def test_floats_round_trip(self):
        vals = [0.1, 1 / 3, 1e-300, 123456789.123456789]
        assert json.loads(dumps(vals)) == vals

    def test_non_finite_become_null(self):
        assert json.loads(dumps({"x": float("nan")})) == {"x": None}
