import numpy as np
import pytest

from agvoice.audio_io import AudioBuffer
from agvoice.dsp import (
    MEL_FLOOR,
    MelParams,
    f0_to_csv,
    filter_centers_hz,
    frame_count,
    mel_filterbank,
    mel_spectrogram,
    mel_to_csv,
    stft_magnitude,
    yin_f0,
)
from agvoice.errors import DegenerateBand, TooShort
from conftest import SR, sawtooth, sine
from oracles import (
    brute_cmnd,
    brute_filterbank,
    brute_yin_frame,
    dft_magnitude_frame,
    mel_center_frequencies,
)


class TestStft:
    def test_tone_at_bin_center(self):
        freq = 48 * SR / 1024
        mag = stft_magnitude(sine(freq))
        assert (np.argmax(mag, axis=1) == 48).all()

    def test_zero_input_framing(self):
        mag = stft_magnitude(AudioBuffer(np.zeros(4096), SR))
        assert mag.shape == (13, 513)
        assert not mag.any()

    def test_too_short(self):
        with pytest.raises(TooShort):
            stft_magnitude(AudioBuffer(np.zeros(1023), SR))

    def test_white_noise_frame_matches_direct_dft(self, rng):
        x = rng.standard_normal(1024)
        mag = stft_magnitude(AudioBuffer(np.concatenate([x, np.zeros(0)]), SR))[0]
        window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(1024) / 1024)
        ref = dft_magnitude_frame(x * window)
        assert np.max(np.abs(mag - ref) / np.maximum(ref, 1e-12)) < 1e-6
        # Parseval over the one-sided spectrum (doubling bins 1..511)
        onesided = mag[0] ** 2 + mag[512] ** 2 + 2 * np.sum(mag[1:512] ** 2)
        energy = np.sum((x * window) ** 2)
        assert abs(onesided - 1024 * energy) / (1024 * energy) < 1e-9


class TestFilterbank:
    def test_rows_nonnegative_unimodal(self):
        fb = mel_filterbank()
        assert (fb >= 0).all()
        for row in fb:
            peak = np.argmax(row)
            assert (np.diff(row[: peak + 1]) >= 0).all()
            assert (np.diff(row[peak:]) <= 0).all()

    def test_centers_strictly_increasing(self):
        centers = filter_centers_hz()
        assert (np.diff(centers) > 0).all()

    def test_tone_lands_in_nearest_band(self):
        mag = stft_magnitude(sine(1000.0))
        mel = mel_filterbank() @ mag.mean(axis=0)
        centers = mel_center_frequencies()
        expected = int(np.argmin([abs(c - 1000.0) for c in centers]))
        assert abs(int(np.argmax(mel)) - expected) <= 1

    def test_matches_brute_construction(self):
        fb = mel_filterbank()
        ref = brute_filterbank()
        assert np.max(np.abs(fb - ref)) < 1e-9

    def test_degenerate_band(self):
        with pytest.raises(DegenerateBand):
            mel_filterbank(MelParams(n_fft=64, win_length=64, n_mels=80))


class TestMelSpectrogram:
    def test_silence_hits_floor(self):
        mel = mel_spectrogram(AudioBuffer(np.zeros(4096), SR))
        assert np.array_equal(mel.frames, np.full((13, 80), np.log(MEL_FLOOR)))

    def test_log_homogeneity(self):
        buf = sine(440.0, seconds=0.2)
        m1 = mel_spectrogram(buf).frames
        m2 = mel_spectrogram(AudioBuffer(buf.samples * 10.0, SR)).frames
        unfloored = m1 > np.log(MEL_FLOOR)
        assert np.allclose(m2[unfloored] - m1[unfloored], np.log(10.0), atol=1e-9)

    def test_frame_arithmetic(self):
        mel = mel_spectrogram(AudioBuffer(np.random.default_rng(0).standard_normal(4096) * 0.1, SR))
        assert mel.frames.shape == (13, 80)


class TestYin:
    def test_pure_tone(self):
        c = yin_f0(sine(220.0))
        interior = slice(1, len(c) - 1)
        assert c.voiced[interior].all()
        assert np.max(np.abs(c.f0_hz[interior] - 220.0)) < 0.5

    def test_silence_unvoiced(self):
        c = yin_f0(AudioBuffer(np.zeros(SR // 2), SR))
        assert not c.voiced.any()
        assert not c.f0_hz.any()

    def test_sawtooth_no_octave_error(self):
        c = yin_f0(sawtooth(110.0))
        interior = slice(1, len(c) - 1)
        assert c.voiced[interior].all()
        assert np.max(np.abs(c.f0_hz[interior] - 110.0)) < 1.0

    def test_matches_brute_frame_oracle(self):
        buf = sawtooth(147.0, seconds=0.3)
        c = yin_f0(buf)
        for t in (0, 5, 10):
            frame = buf.samples[t * 256 : t * 256 + 1024]
            f0, voiced, cmnd = brute_yin_frame(frame)
            assert voiced == c.voiced[t]
            assert abs(f0 - c.f0_hz[t]) < 1e-6
            assert abs(cmnd - c.cmnd_min[t]) < 1e-8

    def test_cmnd_against_brute(self, rng):
        frame = rng.standard_normal(1024)
        from agvoice.dsp import _cmnd, _difference_function

        d = _difference_function(frame, 512)
        _, dp_ref = brute_cmnd(frame, 512)
        d_ref, _ = brute_cmnd(frame, 512)
        assert np.max(np.abs(d - d_ref)) < 1e-6 * np.max(d_ref)
        assert np.max(np.abs(_cmnd(d) - dp_ref)) < 1e-8


class TestAlignment:
    def test_mel_and_f0_frame_counts_agree(self, rng):
        for _ in range(10):
            n = int(rng.integers(1024, 40000))
            buf = AudioBuffer(rng.standard_normal(n) * 0.1, SR)
            expected = (n - 1024) // 256 + 1
            assert frame_count(n) == expected
            assert mel_spectrogram(buf).frames.shape[0] == expected
            assert len(yin_f0(buf)) == expected

    def test_hop_shift_shifts_frames(self, rng):
        x = rng.standard_normal(5000) * 0.1
        a = mel_spectrogram(AudioBuffer(x, SR)).frames
        b = mel_spectrogram(AudioBuffer(x[256:], SR)).frames
        assert np.max(np.abs(a[1 : 1 + len(b)] - b)) < 1e-9

    def test_outputs_finite_and_in_range(self, rng):
        buf = AudioBuffer(np.clip(rng.standard_normal(9000), -1, 1), SR)
        mel = mel_spectrogram(buf)
        c = yin_f0(buf)
        assert np.isfinite(mel.frames).all()
        assert np.isfinite(c.f0_hz).all() and np.isfinite(c.cmnd_min).all()
        voiced = c.voiced
        assert ((c.f0_hz[voiced] >= 60.0) & (c.f0_hz[voiced] <= 500.0)).all()
        assert (c.f0_hz[~voiced] == 0).all()


def test_csv_dumps():
    buf = sine(220.0, seconds=0.2)
    mel = mel_spectrogram(buf)
    lines = mel_to_csv(mel).strip().split("\n")
    assert len(lines) == mel.frames.shape[0]
    assert len(lines[0].split(",")) == 80
    f0_lines = f0_to_csv(yin_f0(buf)).strip().split("\n")
    assert f0_lines[0] == "frame_index,f0_hz,voiced,cmnd_min"
    assert len(f0_lines) == mel.frames.shape[0] + 1
