"""Command-line behavior: output tables, files, exit codes."""

import io
from contextlib import redirect_stderr, redirect_stdout
from pathlib import Path

import numpy as np
import pytest

from qamret import (
    CorpusManifest,
    CropBox,
    ManifestEntry,
    PipelineConfig,
    QamProblem,
    QueryEntry,
    Reranker,
    Stage,
    ValidationError,
    average_precision,
    crop_tensor,
    fit_whitening,
    fmp_detailed,
    load_index,
    load_manifest,
    load_whitening,
    merged_heatmap,
    read_tensor,
    run_query,
    save_descriptors,
    save_manifest,
    solve,
    spoc,
)
from qamret.base_regions import FmpConfig
from qamret.cli import main, write_pgm


def run_cli(capsys, *args):
    code = main([str(a) for a in args])
    cap = capsys.readouterr()
    return code, cap.out, cap.err


def _quiet(*args):
    """Run the CLI inside fixtures without polluting test capture."""
    out, err = io.StringIO(), io.StringIO()
    with redirect_stdout(out), redirect_stderr(err):
        code = main([str(a) for a in args])
    assert code == 0, err.getvalue()
    return out.getvalue()


GEN = ("--height", 8, "--width", 8, "--channels", 12, "--relevant", 4, "--distractors", 8)


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("clicorpus")
    _quiet("gen-synthetic", root, *GEN, "--seed", 3)
    return root


@pytest.fixture(scope="module")
def index_path(corpus_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("cliindex") / "corpus.idx"
    _quiet("index", corpus_dir / "manifest.json", out, "--K", 6)
    return out


@pytest.fixture(scope="module")
def query_path(corpus_dir):
    return corpus_dir / "query.cfm"


def _expected_table(index_path, query_tensor, cfg, stage):
    results = run_query(load_index(index_path), query_tensor, cfg)
    final = results[stage]
    lines = ["rank\timage_id\tscore\tstage"]
    for rank, (image_id, score) in enumerate(final.entries, start=1):
        lines.append(f"{rank}\t{image_id}\t{score!r}\t{final.stage.value}")
    return "".join(line + "\n" for line in lines)


# ---------------------------------------------------------------------------
# generation and indexing


def test_gen_synthetic_reports_manifest(capsys, tmp_path):
    code, out, err = run_cli(capsys, "gen-synthetic", tmp_path, *GEN, "--seed", 3)
    assert code == 0
    assert out.strip() == str(tmp_path / "manifest.json")
    assert "images\t12" in err
    assert (tmp_path / "manifest.json").is_file()


def test_index_builds_and_prints_path(capsys, corpus_dir, tmp_path):
    out_path = tmp_path / "i.idx"
    code, out, err = run_cli(capsys, "index", corpus_dir / "manifest.json", out_path, "--K", 6)
    assert code == 0
    assert out.strip() == str(out_path)
    assert "build\t" in err
    index = load_index(out_path)
    assert index.size == 12
    assert index.snapshot["fmp"]["clusters"] == 6


# ---------------------------------------------------------------------------
# search


def test_search_initial_matches_library(capsys, index_path, query_path, monkeypatch):
    monkeypatch.delenv("QAM_THREADS", raising=False)
    code, out, err = run_cli(capsys, "search", index_path, query_path)
    assert code == 0
    expect = _expected_table(
        index_path,
        read_tensor(query_path),
        PipelineConfig(reranker=Reranker.NONE),
        Stage.INITIAL,
    )
    assert out == expect


def test_search_rerank_and_qe_matches_library(capsys, index_path, query_path, monkeypatch):
    monkeypatch.delenv("QAM_THREADS", raising=False)
    code, out, _ = run_cli(
        capsys, "search", index_path, query_path, "--rerank", "fmp", "--qe", "--N", 6
    )
    assert code == 0
    expect = _expected_table(
        index_path,
        read_tensor(query_path),
        PipelineConfig(shortlist=6, reranker=Reranker.FMP),
        Stage.EXPANDED,
    )
    assert out == expect


def test_search_top_limits_rows(capsys, index_path, query_path):
    code, out, _ = run_cli(capsys, "search", index_path, query_path, "--top", 3)
    assert code == 0
    assert len(out.splitlines()) == 4  # header plus three rows
    code, out, _ = run_cli(capsys, "search", index_path, query_path, "--top", 0)
    assert code == 0 and out == ""


def test_search_out_file(capsys, index_path, query_path, tmp_path):
    dest = tmp_path / "rows.tsv"
    code, out, _ = run_cli(capsys, "search", index_path, query_path, "--out", dest)
    assert code == 0 and out == ""
    code, stdout_version, _ = run_cli(capsys, "search", index_path, query_path)
    assert dest.read_text() == stdout_version


def test_search_crop_matches_library(capsys, index_path, query_path, monkeypatch):
    monkeypatch.delenv("QAM_THREADS", raising=False)
    code, out, _ = run_cli(capsys, "search", index_path, query_path, "--crop", "0,0,3,3")
    assert code == 0
    cropped = crop_tensor(read_tensor(query_path), CropBox(0, 0, 3, 3))
    expect = _expected_table(
        index_path, cropped, PipelineConfig(reranker=Reranker.NONE), Stage.INITIAL
    )
    assert out == expect


def test_search_thread_settings(capsys, index_path, query_path, monkeypatch):
    code, base, _ = run_cli(capsys, "search", index_path, query_path, "--rerank", "fmp",
                            "--threads", 1)
    assert code == 0
    code, multi, _ = run_cli(capsys, "search", index_path, query_path, "--rerank", "fmp",
                             "--threads", 3)
    assert code == 0 and multi == base
    monkeypatch.setenv("QAM_THREADS", "2")
    code, env_run, _ = run_cli(capsys, "search", index_path, query_path, "--rerank", "fmp")
    assert code == 0 and env_run == base
    monkeypatch.setenv("QAM_THREADS", "zero")
    code, _, err = run_cli(capsys, "search", index_path, query_path)
    assert code == 2 and "QAM_THREADS" in err
    monkeypatch.setenv("QAM_THREADS", "0")
    code, _, err = run_cli(capsys, "search", index_path, query_path)
    assert code == 2 and "thread count" in err


def test_search_error_exits(capsys, index_path, query_path, tmp_path):
    code, _, err = run_cli(capsys, "search", tmp_path / "absent.idx", query_path)
    assert code == 2 and "error:" in err
    code, _, err = run_cli(capsys, "search", index_path, query_path, "--qe")
    assert code == 2 and "--qe requires --rerank" in err
    code, _, err = run_cli(capsys, "search", index_path, query_path, "--crop", "1,2,3")
    assert code == 2 and "--crop" in err
    code, _, err = run_cli(capsys, "search", index_path, query_path, "--rerank", "ospp")
    assert code == 2 and "wants ospp" in err


# ---------------------------------------------------------------------------
# eval


def test_eval_table(capsys, index_path, corpus_dir, monkeypatch):
    monkeypatch.delenv("QAM_THREADS", raising=False)
    code, out, _ = run_cli(
        capsys, "eval", index_path, corpus_dir / "manifest.json", "--rerank", "fmp", "--qe"
    )
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "query_id\tinitial\treranked\texpanded"
    assert lines[1].startswith("query\t")
    assert lines[2].startswith("mAP\t")

    manifest = load_manifest(corpus_dir / "manifest.json")
    qt = read_tensor(corpus_dir / manifest.queries[0].tensor_path)
    results = run_query(load_index(index_path), qt, PipelineConfig(reranker=Reranker.FMP))
    rel = manifest.relevance["query"]
    from qamret import QueryJudgment

    judgment = QueryJudgment(rel.relevant, rel.junk)
    expect = [repr(average_precision(results[s], judgment))
              for s in (Stage.INITIAL, Stage.RERANKED, Stage.EXPANDED)]
    assert lines[1] == "query\t" + "\t".join(expect)
    assert lines[2] == "mAP\t" + "\t".join(expect)  # single query: mAP equals AP


def test_eval_missing_relevance(capsys, index_path, corpus_dir, tmp_path):
    manifest = load_manifest(corpus_dir / "manifest.json")
    stripped = CorpusManifest(entries=list(manifest.entries), queries=list(manifest.queries))
    bad = tmp_path / "norel.json"
    save_manifest(stripped, bad)
    # tensors live next to the original manifest, so point the copy there
    for entry in manifest.entries:
        (tmp_path / entry.tensor_path).write_bytes(
            (corpus_dir / entry.tensor_path).read_bytes()
        )
    (tmp_path / "query.cfm").write_bytes((corpus_dir / "query.cfm").read_bytes())
    code, _, err = run_cli(capsys, "eval", index_path, bad)
    assert code == 2 and "no relevance judgments" in err


# ---------------------------------------------------------------------------
# whitening


def test_fit_whitening_from_manifest(capsys, corpus_dir, tmp_path):
    out = tmp_path / "model.wht"
    code, stdout, _ = run_cli(
        capsys, "fit-whitening", corpus_dir / "manifest.json", out, "--dim", 10, "--L", 2
    )
    assert code == 0
    assert "samples\t" in stdout and "retained_dimensions\t10\tof\t12" in stdout
    model = load_whitening(out)
    assert (model.input_dim, model.output_dim) == (12, 10)


def test_fit_whitening_from_descriptor_file(capsys, tmp_path):
    rng = np.random.default_rng(8)
    rows = rng.standard_normal((50, 6))
    src = tmp_path / "rows.dsc"
    save_descriptors(rows, src)
    out = tmp_path / "model.wht"
    code, stdout, _ = run_cli(capsys, "fit-whitening", src, out)
    assert code == 0 and "samples\t50" in stdout
    quantized = rows.astype(np.float32).astype(np.float64)
    expect = fit_whitening(quantized, 6)
    model = load_whitening(out)
    assert np.array_equal(model.mean, expect.mean)
    assert np.array_equal(model.projection, expect.projection)


# ---------------------------------------------------------------------------
# heat maps


def test_heatmap_merged_matches_library(capsys, index_path, query_path, tmp_path):
    out = tmp_path / "map.pgm"
    index = load_index(index_path)
    image_id = index.image_ids[0]
    code, stdout, _ = run_cli(capsys, "heatmap", index_path, query_path, image_id, out)
    assert code == 0 and stdout.strip() == str(out)

    t = read_tensor(index.snapshot["tensor_paths"][image_id])
    detail = fmp_detailed(t, FmpConfig(**{k: int(v) for k, v in index.snapshot["fmp"].items()}))
    q = spoc(read_tensor(query_path))
    sol = solve(QamProblem(q.vector, detail.regions))
    expect = tmp_path / "expect.pgm"
    write_pgm(merged_heatmap(t, detail.channel_cluster, sol.weights), expect)
    assert out.read_bytes() == expect.read_bytes()


def test_heatmap_l1norm(capsys, index_path, query_path, tmp_path):
    out = tmp_path / "map.pgm"
    index = load_index(index_path)
    image_id = index.image_ids[1]
    code, _, _ = run_cli(capsys, "heatmap", index_path, query_path, image_id, out,
                         "--mode", "l1norm")
    assert code == 0
    t = read_tensor(index.snapshot["tensor_paths"][image_id])
    m = t.values.astype(np.float64).sum(axis=2)
    expect = tmp_path / "expect.pgm"
    write_pgm(m / m.max(), expect)
    assert out.read_bytes() == expect.read_bytes()


def test_heatmap_errors(capsys, index_path, query_path, corpus_dir, tmp_path):
    code, _, err = run_cli(capsys, "heatmap", index_path, query_path, "nope", tmp_path / "x.pgm")
    assert code == 2 and "unknown image id" in err
    bare = tmp_path / "bare.idx"
    _quiet("index", corpus_dir / "manifest.json", bare, "--reranker", "none")
    code, _, err = run_cli(capsys, "heatmap", bare, query_path, "relevant-000", tmp_path / "y.pgm")
    assert code == 2 and "merged maps need channel-mask regions" in err


def test_write_pgm_bytes(tmp_path):
    path = tmp_path / "t.pgm"
    write_pgm(np.array([[0.0, 0.5], [0.999, 1.0]]), path)
    assert path.read_bytes() == b"P5\n2 2\n255\n" + bytes([0, 128, 255, 255])
    with pytest.raises(ValidationError):
        write_pgm(np.array([[1.5]]), path)
    with pytest.raises(ValidationError):
        write_pgm(np.zeros(3), path)


# ---------------------------------------------------------------------------
# ground-truth conversion


def test_convert_oxford_gt(capsys, tmp_path):
    gt = tmp_path / "gt"
    gt.mkdir()
    (gt / "tower_1_query.txt").write_text("oxc1_img1 10.5 20.5 30.0 40.0\n")
    (gt / "tower_1_good.txt").write_text("img1\nimg2\n")
    (gt / "tower_1_ok.txt").write_text("img3\n")
    (gt / "tower_1_junk.txt").write_text("img4\nimg2\n")
    out = tmp_path / "manifest.json"
    code, stdout, _ = run_cli(capsys, "convert-oxford-gt", gt, out, "--grid-scale", 0.25)
    assert code == 0 and stdout.strip() == str(out)
    m = load_manifest(out, check_paths=False)
    assert [q.query_id for q in m.queries] == ["tower_1"]
    q = m.queries[0]
    assert q.tensor_path == "img1.cfm"
    assert q.box == CropBox(5, 2, 5, 6)
    rel = m.relevance["tower_1"]
    assert rel.relevant == frozenset({"img1", "img2", "img3"})
    assert rel.junk == frozenset({"img4"})  # junk overlapping relevant is dropped
    assert {e.image_id for e in m.entries} == {"img1", "img2", "img3", "img4"}


def test_convert_oxford_gt_requires_queries(capsys, tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    code, _, err = run_cli(capsys, "convert-oxford-gt", empty, tmp_path / "m.json")
    assert code == 2 and "no *_query.txt" in err
