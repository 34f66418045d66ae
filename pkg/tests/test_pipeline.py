import csv
import json

import numpy as np
import pytest

from rbcseg.geometry import Ellipse, ellipse_pixels, rasterize_ellipse, trace_contours
from rbcseg.normalize import NormalizationStats
from rbcseg.pipeline.cli import main
from rbcseg.pipeline.config import ConfigError, PipelineConfig, load_config
from rbcseg.pipeline.evaluate import (ContourPrediction, ContourTruth, EvalReport, eval_separation,
                                      read_predictions, read_truth_csv, write_truth_csv)
from rbcseg.pipeline.render import (CONCAVE_COLOR, ELLIPSE_COLOR, cell_pixels, crop_cell,
                                    export_crops, render_overlay, write_manifest)
from rbcseg.pipeline.run import (CellAnnotation, foreground_mask, run_segment,
                                 segment_image, timing_report, write_png)
from rbcseg.pipeline.synth import (BACKGROUND, CELL, PlacementError, SceneSpec, exposed_arcs,
                                   gen_synthetic, truth_for_contours)
from rbcseg.separate import separate_overlapping

from oracles import TABLE, chain_scene, mock_eval_inputs


def paint(ellipses, size=(640, 480)):
    w, h = size
    img = np.empty((h, w, 3), np.uint8)
    img[:] = BACKGROUND
    for e in ellipses:
        img[rasterize_ellipse(e, size)] = CELL
    return img


# -- config ----------------------------------------------------------------------------

def test_config_defaults():
    cfg = PipelineConfig()
    assert (cfg.channel, cfg.k, cfg.canvas, cfg.min_area) == ("green", 8, 72, 300.0)
    assert cfg.separation.min_ellipse_area == 300.0
    assert cfg.separation.inside_ratio == 0.8 and cfg.separation.novelty_ratio == 0.2


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nk = 6\ntile_grid = 4x4\nforeground_dark = false  # inline\nchannel = red\n")
    cfg = load_config(path, k=9, min_area="150")
    assert cfg.k == 9 and cfg.tile_grid == (4, 4) and cfg.foreground_dark is False
    assert cfg.channel == "red" and cfg.min_area == 150.0
    path.write_text("[pipeline]\ncanvas = 96\n")
    assert load_config(path).canvas == 96


@pytest.mark.parametrize("text", ["bogus = 1\n", "k = zero\n", "canvas = 40\n", "inside_ratio = 1.5\n",
                                  "channel = alpha\n", "not a pair\n"])
def test_config_errors(tmp_path, text):
    path = tmp_path / "bad.cfg"
    path.write_text(text)
    with pytest.raises(ConfigError):
        load_config(path)


def test_missing_config_file_is_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.cfg")


# -- segmentation runs ------------------------------------------------------------------

def test_blank_image_has_no_annotations():
    res = segment_image(np.full((480, 640, 3), 220, np.uint8), PipelineConfig())
    assert res.annotations == []
    assert res.diagnostics.get("otsu_degenerate") is True


def test_disjoint_discs_give_single_annotations():
    discs = [Ellipse(80 + 110 * i, 200, 18, 18) for i in range(5)]
    res = segment_image(paint(discs), PipelineConfig(), "five")
    assert len(res.annotations) == 5
    assert {a.source for a in res.annotations} == {"single"}
    assert all(a.contour is not None for a in res.annotations)


def test_two_cell_overlap_separates():
    res = segment_image(paint([Ellipse(300, 240, 25, 22, 0.4), Ellipse(340, 250, 24, 21, 1.2)]),
                        PipelineConfig(), "pair")
    assert len(res.contours) == 1
    assert [a.source for a in res.annotations] == ["separated_single_curve"] * 2


def test_annotation_json_schema():
    res = segment_image(paint([Ellipse(300, 240, 25, 22), Ellipse(340, 250, 24, 21),
                               Ellipse(100, 100, 20, 20)]), PipelineConfig(), "x")
    doc = json.loads(res.to_json())
    assert doc["image"] == "x"
    ids = [c["id"] for c in doc["cells"]]
    assert ids == list(range(len(ids)))
    for cell in doc["cells"]:
        assert ("ellipse" in cell) != ("contour" in cell)
        if "ellipse" in cell:
            assert set(cell["ellipse"]) == {"cx", "cy", "a", "b", "theta"}
    back = [CellAnnotation.from_dict("x", c) for c in doc["cells"]]
    assert [b.to_dict() for b in back] == doc["cells"]
    assert "timings" not in doc


def test_annotation_needs_exactly_one_geometry():
    with pytest.raises(ValueError):
        CellAnnotation("x", 0, 0, "single")
    with pytest.raises(ValueError):
        CellAnnotation("x", 0, 0, "single", ellipse=Ellipse(0, 0, 2, 1), contour=np.zeros((3, 2)))


def test_run_segment_continues_past_unreadable_file(tmp_path):
    write_png(tmp_path / "a.png", paint([Ellipse(100, 100, 20, 20)]))
    (tmp_path / "b.png").write_bytes(b"not a png")
    results = run_segment(PipelineConfig(), [tmp_path / "a.png", tmp_path / "b.png"])
    assert results[0].error is None and len(results[0].annotations) == 1
    assert "cannot read" in results[1].error


def test_run_segment_missing_stats(tmp_path):
    with pytest.raises(FileNotFoundError):
        run_segment(PipelineConfig(stats_path=str(tmp_path / "none.json")), [])


def test_normalization_is_applied():
    img = paint([Ellipse(200, 200, 20, 20)])
    stats = NormalizationStats((200.0, 190.0, 200.0))
    res = segment_image(img, PipelineConfig(), "n", stats)
    assert len(res.annotations) == 1
    assert "normalization_skipped" not in res.diagnostics


def test_parallel_run_matches_serial(tmp_path):
    paths = []
    for i in range(3):
        p = tmp_path / f"s{i}.png"
        write_png(p, gen_synthetic(SceneSpec(clusters=2), i).image)
        paths.append(p)
    one = [r.to_json() for r in run_segment(PipelineConfig(), paths)]
    two = [r.to_json() for r in run_segment(PipelineConfig(workers=2), paths)]
    assert one == two


def test_timing_report_shapes():
    assert timing_report([]) == {"rows": [], "mean": {}}
    cfg = PipelineConfig()
    results = [segment_image(gen_synthetic(SceneSpec(), i).image, cfg, f"i{i}") for i in range(20)]
    rep = timing_report(results)
    assert len(rep["rows"]) == 20
    assert set(rep["mean"]) == {"segmentation", "separation"}


# -- crops and overlays -------------------------------------------------------------------

def test_crop_small_disc_centered():
    img = paint([Ellipse(100.5, 80.5, 10, 10)])
    (c,) = trace_contours(foreground_mask(img, PipelineConfig()), 100)
    crop = crop_cell(img, CellAnnotation("d", 0, 0, "single", contour=c.points))
    assert crop.image.shape == (72, 72, 3) and not crop.oversized
    assert (crop.image[0, 0] == 0).all() and (crop.image[-1, -1] == 0).all()
    assert (crop.image[36, 36] == CELL).all()
    ys, xs = np.nonzero(crop.image.any(axis=2))
    assert abs((xs.min() + xs.max()) / 2 - 35.5) <= 1 and abs((ys.min() + ys.max()) / 2 - 35.5) <= 1


def test_crop_ellipse_copies_only_inside_pixels():
    rng = np.random.default_rng(0)
    img = rng.integers(1, 256, (100, 100, 3), dtype=np.uint8)
    e = Ellipse(50.3, 49.8, 15, 9, 0.6)
    crop = crop_cell(img, CellAnnotation("r", 0, 0, "separated_two_curve", ellipse=e))
    xs, ys = ellipse_pixels(e)
    assert np.count_nonzero(crop.image.any(axis=2)) == xs.size
    assert sorted(crop.image[crop.image.any(axis=2)].tolist()) == sorted(img[ys, xs].tolist())


def test_crop_oversized_cell(caplog):
    img = np.full((200, 200, 3), 90, np.uint8)
    crop = crop_cell(img, CellAnnotation("big", 0, 0, "separated_single_curve",
                                         ellipse=Ellipse(100, 100, 40, 30)))
    assert crop.oversized
    assert crop.image.shape == (72, 72, 3)
    assert "larger than the 72 px canvas" in caplog.text


def test_crop_pixels_lie_inside_translated_geometry():
    rng = np.random.default_rng(1)
    img = rng.integers(1, 256, (120, 120, 3), dtype=np.uint8)
    for _ in range(20):
        a = rng.uniform(6, 30)
        e = Ellipse(rng.uniform(35, 85), rng.uniform(35, 85), a, a * rng.uniform(0.5, 1), rng.uniform(0, 3))
        ann = CellAnnotation("p", 0, 0, "separated_single_curve", ellipse=e)
        crop = crop_cell(img, ann)
        xs, ys = cell_pixels(ann)
        dx = (72 - (xs.max() - xs.min() + 1)) // 2 - xs.min()
        dy = (72 - (ys.max() - ys.min() + 1)) // 2 - ys.min()
        allowed = np.zeros((72, 72), bool)
        allowed[ys + dy, xs + dx] = True
        assert not np.any(crop.image.any(axis=2) & ~allowed)


def test_export_crops_writes_files(tmp_path):
    img = paint([Ellipse(100, 100, 20, 20)], (200, 200))
    anns = [CellAnnotation("img", 0, 0, "separated_single_curve", ellipse=Ellipse(100, 100, 20, 20))]
    crops = export_crops(img, anns, 72, tmp_path)
    assert (tmp_path / "img_cell000.png").exists()
    assert anns[0].crop == "img_cell000.png"
    write_manifest(tmp_path / "manifest.csv", crops)
    rows = list(csv.DictReader(open(tmp_path / "manifest.csv")))
    assert rows == [{"crop": "img_cell000.png", "image": "img", "cell_id": "0", "contour_id": "0",
                     "source": "separated_single_curve", "oversized": "0"}]


def test_overlay_without_results_is_identity():
    img = paint([Ellipse(100, 100, 20, 20)])
    assert np.array_equal(render_overlay(img, [], []), img)


def test_overlay_draws_only_primitives():
    truth, mask = chain_scene()
    img = np.where(mask[..., None], np.uint8(CELL), np.uint8(BACKGROUND)).astype(np.uint8)
    (c,) = trace_contours(mask, 300)
    res = separate_overlapping(c, mask)
    out = render_overlay(img, [c], [res])
    changed = (out != img).any(axis=2)
    drawn = np.zeros(mask.shape, bool)
    drawn[c.points[:, 1], c.points[:, 0]] = True
    for e, _ in res.accepted:
        xs, ys = ellipse_pixels(e)
        drawn[ys, xs] = True
    for cp in res.concave_points:
        x, y = cp.coord
        drawn[y - 1:y + 2, x - 1:x + 2] = True
    assert not np.any(changed & ~drawn)
    green = (out == ELLIPSE_COLOR).all(axis=2)
    assert len(res.accepted) == 3 and green.sum() > 100
    red = (out == CONCAVE_COLOR).all(axis=2)
    assert len(res.concave_points) == 4
    for cp in res.concave_points:
        assert red[cp.coord[1], cp.coord[0]]


# -- synthetic scenes -------------------------------------------------------------------

def test_single_ellipse_scene():
    scene = gen_synthetic(SceneSpec(count_range=(1, 1), overlap_range=(0, 0)), 3)
    assert len(scene.ellipses) == 1
    assert [cl.count for cl in scene.clumps] == [1]
    (c,) = trace_contours(foreground_mask(scene.image, PipelineConfig()), 300)
    assert scene.clump_for(c).count == 1


def test_synthetic_is_deterministic():
    a = gen_synthetic(SceneSpec(clusters=3, noise=2.0), 11)
    b = gen_synthetic(SceneSpec(clusters=3, noise=2.0), 11)
    assert np.array_equal(a.image, b.image)
    assert a.ellipses == b.ellipses
    assert not np.array_equal(a.image, gen_synthetic(SceneSpec(clusters=3, noise=2.0), 12).image)


def test_synthetic_truth_matches_pixels():
    scene = gen_synthetic(SceneSpec(count_range=(2, 4)), 5)
    (clump,) = scene.clumps
    assert 2 <= clump.count <= 4
    for e in clump.ellipses:
        assert exposed_arcs(e, [o for o in clump.ellipses if o is not e])[1] >= 0.25
    truth = truth_for_contours(scene, PipelineConfig(), "s")
    assert list(truth.values()) == [ContourTruth(clump.count, clump.intersections)]


def test_synthetic_placement_failure():
    spec = SceneSpec(count_range=(4, 4), overlap_range=(0.59, 0.59), min_exposed=0.9, max_tries=5)
    with pytest.raises(PlacementError):
        gen_synthetic(spec, 0)


def test_scene_spec_validation():
    with pytest.raises(ValueError):
        SceneSpec(count_range=(3, 2))
    with pytest.raises(ValueError):
        SceneSpec(radius_range=(10, 300))
    with pytest.raises(ValueError):
        SceneSpec(overlap_range=(0.2, 1.0))


# -- evaluation -------------------------------------------------------------------------

def test_eval_all_correct():
    truth = {("a", 0): ContourTruth(2, 2), ("a", 1): ContourTruth(4, 5)}
    preds = {("a", 0): ContourPrediction(2, 2), ("a", 1): ContourPrediction(4, 5)}
    assert eval_separation(preds, truth).accuracy == 1.0


def test_eval_table_is_frozen():
    rep = eval_separation(*mock_eval_inputs())
    assert rep.to_table() == TABLE
    o = rep.overall
    assert (o.correct, o.incorrect_concave, o.incorrect_fitting, o.total) == (246, 22, 9, 277)
    assert f"{rep.accuracy:.3f}" == "0.888"


def test_eval_one_concave_point_is_concave_error():
    rep = eval_separation({("a", 0): ContourPrediction(1, 1)}, {("a", 0): ContourTruth(2, 2)})
    assert rep.buckets["2"].incorrect_concave == 1


def test_eval_without_intersections_is_unattributed():
    rep = eval_separation({("a", 0): ContourPrediction(1, 1), ("a", 1): ContourPrediction(3, 4)},
                          {("a", 0): ContourTruth(2), ("a", 1): ContourTruth(3)})
    assert rep.buckets["2"].unattributed == 1
    assert "Unattributed" in rep.to_table()
    assert "Unattributed" not in EvalReport().to_table()


def test_eval_orphans_and_single_cells():
    with pytest.raises(KeyError, match="orphan"):
        eval_separation({("a", 0): ContourPrediction(1, 0)}, {("a", 1): ContourTruth(2, 2)})
    rep = eval_separation({("a", 0): ContourPrediction(1, 0)}, {("a", 0): ContourTruth(1, 0)})
    assert rep.single_cell_contours == 1 and rep.overall.total == 0


def test_eval_accounting_sums():
    rep = eval_separation(*mock_eval_inputs())
    for s in list(rep.buckets.values()) + [rep.overall]:
        assert s.correct + s.incorrect_concave + s.incorrect_fitting + s.unattributed == s.total


def test_truth_csv_roundtrip(tmp_path):
    truth = {("b", 1): ContourTruth(3, 4), ("a", 0): ContourTruth(2)}
    write_truth_csv(tmp_path / "t.csv", truth)
    assert read_truth_csv(tmp_path / "t.csv") == truth
    (tmp_path / "plain.csv").write_text("image,contour_id,true_count\nx,0,2\n")
    assert read_truth_csv(tmp_path / "plain.csv") == {("x", 0): ContourTruth(2)}
    (tmp_path / "bad.csv").write_text("image,count\nx,2\n")
    with pytest.raises(ValueError):
        read_truth_csv(tmp_path / "bad.csv")


def test_read_predictions(tmp_path):
    res = segment_image(paint([Ellipse(300, 240, 25, 22), Ellipse(340, 250, 24, 21)]), PipelineConfig(), "p")
    (tmp_path / "p.json").write_text(res.to_json())
    (tmp_path / "manifest.json").write_text("{}")
    assert read_predictions(tmp_path) == {("p", 0): ContourPrediction(2, 2)}


# -- command line -----------------------------------------------------------------------

def test_cli_end_to_end(tmp_path, capsys):
    syn, out = tmp_path / "syn", tmp_path / "out"
    assert main(["synth", "--scenes", "4", "--seed", "3", "--out", str(syn)]) == 0
    assert len(list(syn.glob("*.png"))) == 4 and (syn / "truth.csv").exists()
    assert main(["fit-stats", "--input", str(syn), "--out", str(tmp_path / "stats.json")]) == 0
    assert NormalizationStats.load(tmp_path / "stats.json").image_count == 4
    assert main(["segment", "--input", str(syn), "--output", str(out), "--overlay", "--crops",
                 "--stats", str(tmp_path / "stats.json")]) == 0
    assert (out / "scene_0000.json").exists() and (out / "scene_0000_overlay.png").exists()
    assert (out / "crops" / "manifest.csv").exists()
    capsys.readouterr()
    assert main(["eval", "--pred", str(out), "--truth", str(syn / "truth.csv"),
                 "--report", str(tmp_path / "rep.json")]) == 0
    printed = capsys.readouterr().out
    assert "Overall accuracy:" in printed
    assert json.loads((tmp_path / "rep.json").read_text())["table"] == printed
    assert main(["export", "--input", str(syn), "--annotations", str(out), "--output", str(tmp_path / "ex")]) == 0
    assert (tmp_path / "ex" / "manifest.csv").exists()


def test_cli_exit_codes(tmp_path):
    assert main(["segment", "--input", str(tmp_path / "missing"), "--output", str(tmp_path / "o")]) == 1
    bad = tmp_path / "bad.cfg"
    bad.write_text("k = -3\n")
    (tmp_path / "in").mkdir()
    write_png(tmp_path / "in" / "a.png", paint([Ellipse(100, 100, 20, 20)]))
    assert main(["segment", "--input", str(tmp_path / "in"), "--output", str(tmp_path / "o"),
                 "--config", str(bad)]) == 2
    assert main(["segment", "--input", str(tmp_path / "in"), "--output", str(tmp_path / "o"),
                 "--stats", str(tmp_path / "nostats.json")]) == 1
    assert main(["no-such-command"]) == 2
    assert main(["synth", "--scenes", "1", "--out", str(tmp_path / "s"), "--count-min", "5",
                 "--count-max", "2"]) == 2


def test_cli_imbalance_and_bench(tmp_path, capsys):
    counts = tmp_path / "counts.csv"
    counts.write_text("class,count\nNormal,6286\nTeardrop,305\n")
    assert main(["imbalance", "--counts", str(counts), "--target", "Normal"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["upsample"]["Teardrop"]["copies"] == 20
    assert main(["bench", "--images", "2", "--clusters", "2", "--report", str(tmp_path / "b.json")]) == 0
    assert len(json.loads((tmp_path / "b.json").read_text())["rows"]) == 2
