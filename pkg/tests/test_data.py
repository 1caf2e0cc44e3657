import numpy as np
import pytest

from pvda.data import (
    BENCHMARKS,
    LABEL_AUDIT,
    GeneratorSpec,
    TargetShift,
    VideoSample,
    default_benchmark,
    generate,
    load_features,
    write_features,
)
from pvda.errors import ConfigError, InputError, UsageError


def spec(**kw):
    base = dict(num_source_classes=4, num_target_classes=2, d_in=5, k=3,
                samples_per_class_source=3, samples_per_class_target=2, seed=1)
    base.update(kw)
    return GeneratorSpec(**base)


class TestGenerate:
    def test_shapes_and_label_spaces(self):
        data = generate(spec())
        assert len(data.source) == 12 and len(data.target) == 4
        assert data.source_frames().shape == (12, 3, 5)
        assert sorted({s.label for s in data.source}) == [0, 1, 2, 3]
        with LABEL_AUDIT.evaluation():
            assert sorted({s.label for s in data.target}) == [0, 1]
        assert data.num_classes == 4 and data.num_target_classes == 2

    def test_no_shift_no_noise_domains_coincide(self):
        data = generate(spec(noise_std=0.0))
        src = {s.label: s.frames for s in data.source}
        with LABEL_AUDIT.evaluation():
            for t in data.target:
                np.testing.assert_array_equal(t.frames, src[t.label])

    def test_confusion_pair_shares_motion_only(self):
        data = generate(spec(noise_std=0.0, temporal_confusion_pairs=[(3, 1)]))
        by_class = {s.label: s.frames for s in data.source}
        np.testing.assert_allclose(np.diff(by_class[3], axis=0), np.diff(by_class[1], axis=0), atol=1e-15)
        assert not np.allclose(by_class[3][0], by_class[1][0])
        assert not np.allclose(np.diff(by_class[2], axis=0), np.diff(by_class[1], axis=0))

    def test_motion_norm_and_unit_prototypes(self):
        data = generate(spec(noise_std=0.0))
        frames = data.source[0].frames
        np.testing.assert_allclose(np.linalg.norm(frames[0]), 1.0, atol=1e-12)
        np.testing.assert_allclose(np.linalg.norm(frames[-1] - frames[0]), 0.5, atol=1e-12)

    def test_shift_preserves_shape_of_clean_signal(self):
        # rotation and offset are rigid, so frame-to-frame distances survive
        base = dict(noise_std=0.0)
        clean = generate(spec(**base))
        shifted = generate(spec(target_shift=TargetShift(0.7, 0.9, 1.0), **base))
        a, b = clean.target[0].frames, shifted.target[0].frames
        np.testing.assert_allclose(np.linalg.norm(np.diff(a, axis=0), axis=1),
                                   np.linalg.norm(np.diff(b, axis=0), axis=1), atol=1e-12)
        assert not np.allclose(a, b)

    def test_deterministic(self):
        assert generate(spec()) == generate(spec())
        assert generate(spec()).spec_fingerprint == generate(spec()).spec_fingerprint
        assert generate(spec()) != generate(spec(seed=2))

    @pytest.mark.parametrize(
        "kw",
        [
            dict(num_target_classes=0),
            dict(num_target_classes=5),
            dict(temporal_confusion_pairs=[(1, 0)]),
            dict(temporal_confusion_pairs=[(3, 2)]),
            dict(k=1),
            dict(noise_std=-0.1),
        ],
    )
    def test_invalid_spec(self, kw):
        with pytest.raises(ConfigError):
            spec(**kw)

    def test_dict_round_trip(self):
        s = spec(temporal_confusion_pairs=[(2, 0)], target_shift=TargetShift(0.1, 0.2, 3.0))
        assert GeneratorSpec.from_dict(s.to_dict()) == s
        with pytest.raises(ConfigError):
            GeneratorSpec.from_dict({"num_source_classes": 3, "num_target_classes": 2, "colour": 1})


class TestBenchmarks:
    def test_easy(self):
        s = default_benchmark("easy-7of14")
        assert (s.num_source_classes, s.num_target_classes) == (14, 7)
        assert s.temporal_confusion_pairs == []

    def test_hard(self):
        s = default_benchmark("hard-5of10-confused")
        assert (s.num_source_classes, s.num_target_classes) == (10, 5)
        assert s.temporal_confusion_pairs == [(5, 0), (6, 1), (7, 2)]
        assert all(o >= 5 > sh for o, sh in s.temporal_confusion_pairs)
        assert (s.target_shift.rotation_angle, s.target_shift.offset_scale, s.target_shift.noise_multiplier) == (0.6, 1.0, 2.0)

    def test_equal(self):
        s = default_benchmark("equal-14of14")
        assert s.num_source_classes == s.num_target_classes == 14

    def test_unknown(self):
        with pytest.raises(UsageError):
            default_benchmark("medium")

    def test_names(self):
        assert set(BENCHMARKS) == {"easy-7of14", "hard-5of10-confused", "equal-14of14"}


def write_csv(path, rows, d=4):
    header = "id,domain,label,frame," + ",".join(f"f{i}" for i in range(d))
    path.write_text("\n".join([header] + rows) + "\n")
    return path


def frame_rows(vid, domain, label, k, d=4, start=0.0):
    return [f"{vid},{domain},{label},{j}," + ",".join(str(start + j + i / 10) for i in range(d)) for j in range(k)]


class TestFeatureFiles:
    def test_small_file(self, tmp_path):
        path = write_csv(tmp_path / "f.csv", frame_rows("a", "source", 0, 3) + frame_rows("b", "target", "", 3))
        data = load_features(path)
        assert data.source_frames().shape == (1, 3, 4)
        assert data.target_frames().shape == (1, 3, 4)
        assert data.target[0]._label is None
        assert data.source[0].frames[2, 1] == 2.1

    def test_round_trip(self, tmp_path):
        data = generate(spec(temporal_confusion_pairs=[(2, 0)]))
        write_features(data, tmp_path / "f.csv")
        assert load_features(tmp_path / "f.csv") == data

    def test_ragged_video_names_row(self, tmp_path):
        rows = frame_rows("a", "source", 0, 3) + frame_rows("b", "source", 1, 2) + frame_rows("c", "source", 1, 3)
        with pytest.raises(InputError, match="row 5"):
            load_features(write_csv(tmp_path / "f.csv", rows))

    def test_non_numeric_cell(self, tmp_path):
        rows = frame_rows("a", "source", 0, 3)
        rows[1] = rows[1].replace("1.1", "abc")
        with pytest.raises(InputError, match="row 3"):
            load_features(write_csv(tmp_path / "f.csv", rows))

    def test_missing_header(self, tmp_path):
        path = tmp_path / "f.csv"
        path.write_text("\n".join(frame_rows("a", "source", 0, 3)))
        with pytest.raises(InputError, match="header"):
            load_features(path)

    def test_wrong_cell_count(self, tmp_path):
        rows = frame_rows("a", "source", 0, 3)
        rows[2] += ",9"
        with pytest.raises(InputError, match="row 4"):
            load_features(write_csv(tmp_path / "f.csv", rows))

    def test_frames_out_of_order(self, tmp_path):
        rows = frame_rows("a", "source", 0, 3)
        rows[1], rows[2] = rows[2], rows[1]
        with pytest.raises(InputError, match="row 3"):
            load_features(write_csv(tmp_path / "f.csv", rows))

    def test_missing_file(self, tmp_path):
        with pytest.raises(InputError):
            load_features(tmp_path / "nope.csv")


class TestQuarantine:
    def test_source_labels_are_free(self):
        data = generate(spec())
        LABEL_AUDIT.reset()
        data.source_labels()
        _ = data.target_frames()
        assert LABEL_AUDIT.training_reads == 0

    def test_target_label_reads_are_counted(self):
        sample = VideoSample(np.zeros((2, 2)), 1, "target", "t")
        LABEL_AUDIT.reset()
        assert sample.label == 1
        assert LABEL_AUDIT.training_reads == 1
        with LABEL_AUDIT.evaluation():
            assert sample.label == 1
        assert (LABEL_AUDIT.training_reads, LABEL_AUDIT.evaluation_reads) == (1, 1)
        LABEL_AUDIT.reset()

    def test_sample_validation(self):
        with pytest.raises(InputError):
            VideoSample(np.array([[np.nan, 0.0]]), 0, "source", "x")
        with pytest.raises(InputError):
            VideoSample(np.zeros((2, 2)), 0, "validation", "x")
