import numpy as np
import pytest

from stereolidar.geometry import Box3D
from stereolidar.kitti_io import (
    FormatError,
    LabelRecord,
    StereoProposal,
    load_proposals,
    parse_calib,
    parse_labels,
    read_checkpoint,
    read_velodyne_bin,
    write_calib,
    write_checkpoint,
    write_detections,
    write_labels,
    write_proposals,
)
from stereolidar.synthetic import kitti_like_calib

KITTI_LABEL = ("Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59\n"
               "DontCare -1 -1 -10 503.89 169.71 590.61 190.13 -1 -1 -1 -1000 -1000 -1000 -10\n")


def test_calib_round_trip_is_bit_identical():
    text = write_calib(kitti_like_calib())
    calib = parse_calib(text)
    assert write_calib(calib) == text
    assert np.array_equal(calib.P_right, kitti_like_calib().P_right)


def test_calib_accepts_kitti_notation_and_extra_keys():
    text = write_calib(kitti_like_calib()).replace("721.5377", "7.215377e+02") + "Tr_imu_to_velo: 1 0 0 0 0 1 0 0 0 0 1 0\n"
    calib, raw = parse_calib(text, full=True)
    assert calib.P_left[0, 0] == 721.5377 and "Tr_imu_to_velo" in raw


def test_label_parse_and_write():
    recs = parse_labels(KITTI_LABEL)
    assert recs[0].type == "Car" and recs[0].dimensions == (1.65, 1.67, 3.64) and recs[0].score is None
    assert recs[1].type == "DontCare"
    again = write_labels(recs)
    assert write_labels(parse_labels(again)) == again
    assert parse_labels(again) == recs


def test_detections_need_scores_and_round_trip():
    rec = LabelRecord.from_box(Box3D(1.0, 1.6, 20.0, 1.6, 1.5, 3.9, 0.1), bbox=(10, 20, 50, 60), score=0.875)
    text = write_detections([rec])
    assert parse_labels(text) == [rec] and write_detections(parse_labels(text)) == text
    with pytest.raises(ValueError):
        write_detections([LabelRecord.from_box(Box3D(0, 0, 5, 1, 1, 1, 0))])


def test_velodyne_round_trip():
    pts = np.random.default_rng(0).normal(size=(100, 4)).astype("<f4")
    data = pts.tobytes()
    back = read_velodyne_bin(data)
    assert back.shape == (100, 4) and back.astype("<f4").tobytes() == data
    with pytest.raises(FormatError):
        read_velodyne_bin(data[:-3])


def test_proposals_round_trip():
    props = [StereoProposal("000001", (1.0, 2.0, 30.5, 40.25), (0.5, 2.0, 29.0, 40.25), 5.0, 20.0, 0.9),
             StereoProposal("000002", (1.0, 2.0, 3.0, 4.0), (1.0, 2.0, 3.0, 4.0), 1.0, 2.0, 0.1)]
    text = write_proposals(props)
    loaded = load_proposals("# comment\n" + text)
    assert [p for v in loaded.values() for p in v] == props
    assert write_proposals([p for v in loaded.values() for p in v]) == text


def test_checkpoint_round_trip():
    tensors = {"a": np.arange(6.0).reshape(2, 3), "scalar": np.array(3.5), "b/c": np.array([-0.0, 1e-300])}
    data = write_checkpoint(tensors)
    back = read_checkpoint(data)
    assert list(back) == list(tensors)
    assert all(back[k].tobytes() == np.asarray(tensors[k]).tobytes() for k in tensors)
    assert write_checkpoint(back) == data


def test_errors_carry_location():
    with pytest.raises(FormatError) as e:
        parse_labels(KITTI_LABEL + "Car 0 0 0 1 2 3\n", "x.txt")
    assert e.value.line == 3 and "x.txt:3" in str(e.value)
    with pytest.raises(FormatError) as e:
        parse_calib(write_calib(kitti_like_calib()).replace("R0_rect: 1.0", "R0_rect: abc"))
    assert e.value.line == 5 and e.value.field == "R0_rect"
