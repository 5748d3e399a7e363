import struct

import numpy as np
import pytest

from conditional_exit import EvalRecord
from config import MICRO_MODEL, RunConfig
from error_handler import FormatError, StorageError
from model import AdaFocusModel
from storage import (decode_checkpoint, decode_dataset, decode_records, encode_checkpoint, encode_dataset,
                     encode_records, read_checkpoint, read_dataset, read_records, write_checkpoint,
                     write_dataset, write_records)


def u32(value):
    return struct.pack('<I', value)


class TestDataset:
    def test_file_round_trip(self, small_dataset, tmp_path):
        path = str(tmp_path / 'train.uafd')
        size = write_dataset(path, small_dataset)
        loaded = read_dataset(path)
        assert size == (tmp_path / 'train.uafd').stat().st_size
        assert loaded.config == small_dataset.config
        assert np.array_equal(loaded.frames, small_dataset.frames)
        assert np.array_equal(loaded.labels, small_dataset.labels)
        for a, b in zip(loaded.videos, small_dataset.videos):
            assert np.array_equal(a.informative_mask, b.informative_mask)
            np.testing.assert_array_equal(a.truth_track, b.truth_track)

    def test_truncated_frames_report_offset_and_sizes(self, small_dataset):
        buf = encode_dataset(small_dataset)
        s = small_dataset.config
        frame_bytes = 4 * s.T0 * s.C * s.H * s.W
        with pytest.raises(FormatError) as info:
            decode_dataset(buf[:-3])
        error = info.value
        assert error.offset == len(buf) - frame_bytes
        assert error.expected == frame_bytes
        assert error.actual == frame_bytes - 3
        assert f"expected {frame_bytes} bytes" in str(error)

    def test_trailing_bytes(self, small_dataset):
        buf = encode_dataset(small_dataset)
        with pytest.raises(FormatError) as info:
            decode_dataset(buf + b'\x00')
        assert info.value.offset == len(buf)

    def test_bad_magic(self, small_dataset):
        buf = encode_dataset(small_dataset)
        with pytest.raises(FormatError) as info:
            decode_dataset(b'UAFX' + buf[4:])
        assert info.value.offset == 0

    def test_unknown_version(self, small_dataset):
        buf = encode_dataset(small_dataset)
        with pytest.raises(FormatError):
            decode_dataset(buf[:4] + u32(2) + buf[8:])

    def test_missing_file_is_storage_error(self, tmp_path):
        with pytest.raises(StorageError) as info:
            read_dataset(str(tmp_path / 'absent.uafd'))
        assert info.value.exit_code == 3


class TestCheckpoint:
    def test_known_bytes(self):
        config = RunConfig()
        cfg = config.to_json().encode('utf-8')
        expected = (b'UAFK' + u32(1) + u32(len(cfg)) + cfg
                    + u32(1) + b'w' + u32(1) + u32(1) + bytes.fromhex('000000000000f83f'))
        assert encode_checkpoint(config, {'w': np.array([1.5])}) == expected
        decoded_config, params = decode_checkpoint(expected)
        assert decoded_config == config
        assert params['w'].tolist() == [1.5]

    def test_model_survives_save_and_load(self, micro_model, micro_batch, tmp_path):
        config = RunConfig(model=MICRO_MODEL, steps=5)
        path = str(tmp_path / 'checkpoint.uafk')
        write_checkpoint(path, config, micro_model.params)
        loaded_config, params = read_checkpoint(path)
        assert loaded_config == config
        assert loaded_config.config_hash() == config.config_hash()
        restored = AdaFocusModel(loaded_config.model, params)
        assert np.array_equal(restored.predict(micro_batch[0]).probs, micro_model.predict(micro_batch[0]).probs)

    def test_truncated_parameter(self):
        buf = encode_checkpoint(RunConfig(), {'w': np.arange(4.0)})
        with pytest.raises(FormatError) as info:
            decode_checkpoint(buf[:-8])
        assert info.value.expected == 32 and info.value.actual == 24


class TestRecords:
    def test_known_bytes(self):
        buf = (b'UAFE' + u32(1) + u32(1) + u32(2) + u32(1)
               + u32(1) + bytes.fromhex('000000000000d03f') + bytes.fromhex('000000000000e83f'))
        records = decode_records(buf)
        assert len(records) == 1
        assert records[0].label == 1
        assert records[0].probs.tolist() == [[0.25, 0.75]]
        assert encode_records(records) == buf

    def test_file_round_trip_recomputes_entropies(self, tmp_path, rng):
        probs = rng.dirichlet(np.ones(3), size=(5, 2))
        records = [EvalRecord.from_probs(p, i % 3) for i, p in enumerate(probs)]
        path = str(tmp_path / 'eval.uafe')
        write_records(path, records)
        loaded = read_records(path)
        for a, b in zip(loaded, records):
            assert a.label == b.label
            assert np.array_equal(a.probs, b.probs)
            assert np.array_equal(a.entropies, b.entropies)

    def test_mixed_shapes_are_rejected(self):
        records = [EvalRecord.from_probs(np.full((2, 2), 0.5), 0), EvalRecord.from_probs(np.full((3, 2), 0.5), 0)]
        with pytest.raises(FormatError):
            encode_records(records)

    def test_empty_set_is_rejected(self):
        with pytest.raises(FormatError):
            encode_records([])

    def test_truncated_record(self):
        buf = encode_records([EvalRecord.from_probs(np.full((1, 2), 0.5), 0)] * 2)
        with pytest.raises(FormatError) as info:
            decode_records(buf[:-1])
        assert info.value.expected == 16 and info.value.actual == 15
