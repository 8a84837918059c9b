import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.io import wavfile

from beatforge.audio_io import (AudioClip, BeatAnnotation, CorruptFile,
                                DatasetManifest, ManifestEntry, ManifestError,
                                NonMonotonicTimes, ParseError,
                                UnsupportedFormat, load_manifest, load_wav,
                                parse_annotation, parse_annotation_text,
                                resample, save_manifest, serialize_annotation,
                                synth_clicks, write_annotation, write_wav)


# load_wav

def test_silence_16bit(tmp_path):
    path = tmp_path / "silence.wav"
    wavfile.write(path, 16000, np.zeros(16000, dtype=np.int16))
    clip = load_wav(path)
    assert clip.sample_rate == 16000
    assert len(clip) == 16000
    assert np.all(clip.samples == 0)


def test_stereo_symmetric_downmix(tmp_path):
    path = tmp_path / "stereo.wav"
    data = np.tile(np.array([[0.5, -0.5]], dtype=np.float32), (800, 1))
    wavfile.write(path, 8000, data)
    clip = load_wav(path)
    assert clip.samples.shape == (800,)
    assert np.all(clip.samples == 0)


def test_full_scale_square_pcm_scaling(tmp_path):
    path = tmp_path / "square.wav"
    square = np.tile(np.array([32767, -32767], dtype=np.int16), 50)
    wavfile.write(path, 16000, square)
    clip = load_wav(path)
    expected = np.tile([32767 / 32768, -32767 / 32768], 50)
    np.testing.assert_array_equal(clip.samples, expected)


def test_float_roundtrip(tmp_path):
    path = tmp_path / "f.wav"
    clip = AudioClip(np.linspace(-0.9, 0.9, 101), 22050)
    write_wav(path, clip, subtype="FLOAT")
    back = load_wav(path)
    np.testing.assert_allclose(back.samples, clip.samples, atol=1e-7)
    assert back.sample_rate == 22050


def test_not_a_wav(tmp_path):
    path = tmp_path / "x.wav"
    path.write_bytes(b"ID3 this is an mp3, honest")
    with pytest.raises(UnsupportedFormat):
        load_wav(path)


def test_truncated_wav(tmp_path):
    path = tmp_path / "t.wav"
    wavfile.write(path, 16000, np.zeros(1000, dtype=np.int16))
    raw = path.read_bytes()
    path.write_bytes(raw[:30])
    with pytest.raises((CorruptFile, UnsupportedFormat)):
        load_wav(path)


def test_missing_file(tmp_path):
    with pytest.raises(CorruptFile):
        load_wav(tmp_path / "nope.wav")


def test_clip_rejects_nonfinite():
    with pytest.raises(ValueError):
        AudioClip(np.array([0.0, np.nan]), 16000)


# resample

def test_resample_identity():
    clip = AudioClip(np.random.default_rng(0).standard_normal(500), 16000)
    out = resample(clip, 16000)
    np.testing.assert_array_equal(out.samples, clip.samples)


def test_resample_length():
    clip = AudioClip(np.zeros(32000), 32000)
    out = resample(clip, 16000)
    assert len(out) == 16000 and out.sample_rate == 16000


def test_resample_keeps_dominant_frequency():
    sr = 48000
    t = np.arange(sr) / sr
    clip = AudioClip(np.sin(2 * np.pi * 100 * t), sr)
    out = resample(clip, 16000)
    spectrum = np.abs(np.fft.rfft(out.samples))
    freqs = np.fft.rfftfreq(len(out), 1 / 16000)
    assert freqs[np.argmax(spectrum)] == pytest.approx(100.0, abs=1.0)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(10, 3000),
       r1=st.sampled_from([8000, 16000, 22050, 44100, 48000]),
       r2=st.sampled_from([8000, 16000, 22050, 44100, 48000]))
def test_resample_roundtrip_duration(n, r1, r2):
    clip = AudioClip(np.zeros(n), r1)
    back = resample(resample(clip, r2), r1)
    # the intermediate length is quantised to the coarser grid
    assert abs(len(back) - n) / r1 <= 1.0 / min(r1, r2) + 1e-12


# annotations

def test_parse_four_events():
    ann = parse_annotation_text("0.5 1\n1.0 2\n1.5 3\n2.0 4")
    assert len(ann) == 4
    np.testing.assert_array_equal(ann.downbeats, [0.5])
    np.testing.assert_array_equal(ann.beats, [0.5, 1.0, 1.5, 2.0])


def test_parse_empty(tmp_path):
    path = tmp_path / "empty.beats"
    path.write_text("")
    ann = parse_annotation(path)
    assert len(ann) == 0


def test_parse_non_monotonic():
    with pytest.raises(NonMonotonicTimes):
        parse_annotation_text("1.0 2\n0.5 1")


def test_parse_error_reports_line():
    with pytest.raises(ParseError) as info:
        parse_annotation_text("0.5 1\n# comment\nabc 2\n")
    assert info.value.line_no == 3


def test_parse_optional_position():
    ann = parse_annotation_text("0.5\n1.0\t1\n")
    assert ann.events == [(0.5, 0), (1.0, 1)]
    assert ann.has_bar_positions


def test_annotation_rejects_unsorted():
    with pytest.raises(NonMonotonicTimes):
        BeatAnnotation(np.array([1.0, 1.0]), np.array([1, 2]))


event_lists = st.lists(
    st.tuples(st.integers(0, 10 ** 8), st.integers(0, 7)),
    max_size=30, unique_by=lambda e: e[0]).map(
        lambda ev: [(t / 1e6, p) for t, p in sorted(ev)])


@settings(max_examples=100, deadline=None)
@given(events=event_lists)
def test_serialize_parse_roundtrip(events):
    ann = BeatAnnotation.from_events(events)
    back = parse_annotation_text(serialize_annotation(ann))
    assert back.events == [(round(t, 6), p) for t, p in events]
    assert serialize_annotation(back) == serialize_annotation(ann)


def test_write_annotation(tmp_path):
    ann = BeatAnnotation.from_events([(0.25, 1), (0.75, 2)])
    path = tmp_path / "a.beats"
    write_annotation(path, ann)
    assert path.read_text() == "0.250000\t1\n0.750000\t2\n"


# manifests

def test_manifest_text_and_json(tmp_path):
    (tmp_path / "a.wav").write_bytes(b"")
    (tmp_path / "a.beats").write_text("")
    txt = tmp_path / "m.txt"
    txt.write_text("a.wav a.beats train\nb.wav b.beats valid\n")
    man = load_manifest(txt)
    assert [e.split for e in man.entries] == ["train", "valid"]
    assert man.entries[0].audio_path == str(tmp_path / "a.wav")
    assert [e.audio_path for e in man.missing()] == [str(tmp_path / "b.wav")]

    js = tmp_path / "m.json"
    save_manifest(js, man)
    again = load_manifest(js)
    assert again.entries == man.entries
    assert json.loads(js.read_text())["entries"][1]["split"] == "valid"


def test_manifest_duplicate_paths():
    with pytest.raises(ManifestError):
        DatasetManifest([ManifestEntry("a.wav", "a.beats"),
                         ManifestEntry("a.wav", "b.beats")])


def test_manifest_bad_split():
    with pytest.raises(ManifestError):
        DatasetManifest([ManifestEntry("a.wav", "a.beats", "holdout")])


def test_manifest_unreadable(tmp_path):
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "missing.txt")


# synthetic clicks

def test_clicks_120_bpm_meter_4():
    clip, ann = synth_clicks(120, 4, 10.0)
    assert len(clip) == 160000
    np.testing.assert_allclose(ann.beats, np.arange(20) * 0.5)
    np.testing.assert_allclose(ann.downbeats, [0, 2, 4, 6, 8])


def test_clicks_60_bpm_meter_1():
    _, ann = synth_clicks(60, 1, 3.0)
    np.testing.assert_allclose(ann.beats, [0, 1, 2])
    np.testing.assert_allclose(ann.downbeats, [0, 1, 2])


def test_clicks_100_bpm_meter_3():
    _, ann = synth_clicks(100, 3, 6.0)
    np.testing.assert_allclose(ann.downbeats, [0.0, 1.8, 3.6, 5.4])


def test_click_levels():
    clip, ann = synth_clicks(120, 4, 4.0)
    peaks = [clip.samples[int(round(t * 16000))] for t in ann.times]
    down = peaks[0]
    other = peaks[1]
    assert 20 * np.log10(down / other) == pytest.approx(6.0, abs=1e-9)


@pytest.mark.parametrize("bpm,meter", [(30, 4), (400, 4), (120, 0)])
def test_clicks_preconditions(bpm, meter):
    with pytest.raises(ValueError):
        synth_clicks(bpm, meter, 1.0)
