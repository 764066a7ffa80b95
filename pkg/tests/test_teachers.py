import numpy as np
import pytest

from pointrecon.errors import BadClass, BadMagic, DuplicateId, MissingPrompt, Truncated
from pointrecon.teachers import (PROMPT_PREFIXES, PROMPT_SUFFIXES, OracleTeacher,
                                 OracleTeacherSpec, TeacherEmbedding, load_embeddings,
                                 prompt_grid, save_embeddings, text_class_embedding)


class TestRcemb:
    def test_round_trip_bit_exact(self, rng, tmp_path):
        vecs = [(f"id_{i}", rng.normal(size=12).astype(np.float32)) for i in range(7)]
        path = tmp_path / "emb.rcemb"
        save_embeddings(path, 12, vecs)
        teacher = load_embeddings(path, "image")
        assert teacher.dim == 12
        for rid, v in vecs:
            np.testing.assert_array_equal(teacher.table[rid], v)

    def test_empty_table_valid(self, tmp_path):
        path = tmp_path / "empty.rcemb"
        save_embeddings(path, 8, [])
        teacher = load_embeddings(path)
        assert teacher.table == {}

    def test_duplicate_id_rejected(self, rng, tmp_path):
        path = tmp_path / "dup.rcemb"
        v = rng.normal(size=4).astype(np.float32)
        save_embeddings(path, 4, [("a", v), ("a", v)])
        with pytest.raises(DuplicateId):
            load_embeddings(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.rcemb"
        path.write_bytes(b"WRONG1" + b"\x00" * 8)
        with pytest.raises(BadMagic):
            load_embeddings(path)

    def test_truncated(self, rng, tmp_path):
        path = tmp_path / "t.rcemb"
        save_embeddings(path, 4, [("a", rng.normal(size=4).astype(np.float32))])
        blob = path.read_bytes()
        path.write_bytes(blob[:-3])
        with pytest.raises(Truncated):
            load_embeddings(path)

    def test_unicode_ids(self, rng, tmp_path):
        path = tmp_path / "u.rcemb"
        save_embeddings(path, 4, [("chaise longue é", rng.normal(size=4).astype(np.float32))])
        teacher = load_embeddings(path)
        assert "chaise longue é" in teacher.table


class TestOracleTeacher:
    def test_sigma_zero_is_anchor(self):
        teacher = OracleTeacher(OracleTeacherSpec(4, 16, 0.0, seed=3))
        v = teacher.vector(2, sample_seed=99)
        np.testing.assert_array_equal(v, teacher.anchors[2])

    def test_same_class_same_vector_at_sigma_zero(self):
        teacher = OracleTeacher(OracleTeacherSpec(4, 16, 0.0, seed=3))
        np.testing.assert_array_equal(teacher.vector(1, 0), teacher.vector(1, 12345))

    def test_deterministic_under_seeds(self):
        a = OracleTeacher(OracleTeacherSpec(4, 16, 0.25, seed=3))
        b = OracleTeacher(OracleTeacherSpec(4, 16, 0.25, seed=3))
        np.testing.assert_array_equal(a.vector(1, 7), b.vector(1, 7))

    def test_unit_norm(self):
        teacher = OracleTeacher(OracleTeacherSpec(4, 16, 0.5, seed=3))
        for c in range(4):
            assert np.linalg.norm(teacher.vector(c, 5)) == pytest.approx(1.0, abs=1e-6)

    def test_intra_beats_inter_cosine(self):
        teacher = OracleTeacher(OracleTeacherSpec(4, 32, 0.1, seed=9))
        draws = {c: np.stack([teacher.vector(c, s) for s in range(250)]) for c in range(4)}
        intra, inter = [], []
        for c in range(4):
            sims = draws[c] @ draws[c].T
            intra.append(sims[np.triu_indices(250, 1)].mean())
            other = (c + 1) % 4
            inter.append((draws[c] @ draws[other].T).mean())
        assert np.mean(intra) > np.mean(inter)

    def test_bad_class(self):
        teacher = OracleTeacher(OracleTeacherSpec(4, 16, 0.0, seed=3))
        with pytest.raises(BadClass):
            teacher.vector(4, 0)


class TestClassEmbedding:
    def _file_teacher(self, rng, prompts, dim=8):
        table = {p: rng.normal(size=dim).astype(np.float32) for p in prompts}
        return TeacherEmbedding("text", dim, table)

    def test_single_prompt_is_normalized_embedding(self, rng):
        teacher = self._file_teacher(rng, ["a chair"])
        out = text_class_embedding(teacher, "chair", ["a chair"])
        raw = teacher.table["a chair"].astype(np.float64)
        np.testing.assert_allclose(out, raw / np.linalg.norm(raw), rtol=1e-6)

    def test_duplicate_prompt_idempotent(self, rng):
        teacher = self._file_teacher(rng, ["x chair"])
        once = text_class_embedding(teacher, "chair", ["x chair"])
        twice = text_class_embedding(teacher, "chair", ["x chair", "x chair"])
        np.testing.assert_allclose(once, twice, rtol=1e-6)

    def test_prompt_grid_size(self):
        assert len(PROMPT_PREFIXES) == 20
        assert len(PROMPT_SUFFIXES) == 4
        grid = prompt_grid("chair")
        assert len(grid) == 80
        assert len(set(grid)) == 80
        assert all("chair" in p for p in grid)

    def test_grid_ensemble_averages_80(self, rng):
        prompts = prompt_grid("sofa")
        teacher = self._file_teacher(rng, prompts)
        out = text_class_embedding(teacher, "sofa", prompts)
        normalized = np.stack([
            teacher.table[p] / np.linalg.norm(teacher.table[p]) for p in prompts
        ]).astype(np.float64)
        mean = normalized.mean(axis=0)
        np.testing.assert_allclose(out, mean / np.linalg.norm(mean), rtol=1e-5)

    def test_missing_prompt(self, rng):
        teacher = self._file_teacher(rng, ["a chair"])
        with pytest.raises(MissingPrompt):
            text_class_embedding(teacher, "chair", ["missing prompt"])

    def test_empty_prompts_rejected(self, rng):
        teacher = self._file_teacher(rng, ["a chair"])
        with pytest.raises(MissingPrompt):
            text_class_embedding(teacher, "chair", [])

    def test_oracle_ignores_prompts(self):
        teacher = OracleTeacher(OracleTeacherSpec(3, 8, 0.0, seed=1), "text")
        a = text_class_embedding(teacher, "cube", ["p1"], class_id=1)
        b = text_class_embedding(teacher, "cube", ["p1", "p2", "p3"], class_id=1)
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(a, teacher.anchors[1])
