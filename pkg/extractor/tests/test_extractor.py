"""Extractor tests against tiny local checkpoints, plus the consumer contract."""

import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from moerec_extractor.extract import (
    Entity,
    ExtractorConfig,
    extract_image,
    extract_text,
    main,
    read_entities,
    validate_output,
)


def write_products(path: Path, texts):
    with open(path, "w") as f:
        for i, text in enumerate(texts):
            f.write(json.dumps({"product_id": f"p{i}", "description": text}) + "\n")


def load_vectors(path) -> dict:
    lines = Path(path).read_text().splitlines()
    header = json.loads(lines[0])
    records = {}
    for line in lines[1:]:
        row = json.loads(line)
        records[row["entity_id"]] = np.asarray(row["values"])
    return header, records


def cosine(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


class TestReadEntities:
    def test_user_and_product_rows(self, tmp_path):
        path = tmp_path / "mixed.jsonl"
        path.write_text(
            json.dumps({"user_id": "u1", "self_description": "oat snack"}) + "\n"
            + json.dumps({"product_id": "p1", "description": "apple"}) + "\n"
        )
        entities = read_entities(path)
        assert [e.entity_id for e in entities] == ["u1", "p1"]
        assert entities[0].text == "oat snack"

    def test_missing_id_rejected(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text(json.dumps({"description": "apple"}) + "\n")
        with pytest.raises(ValueError, match="entity_id"):
            read_entities(path)


class TestExtractText:
    def test_record_count_and_header_dim(self, tmp_path, tiny_bert):
        src = tmp_path / "products.jsonl"
        write_products(src, ["fresh apple fruit", "oat pack"])
        out = tmp_path / "text.jsonl"
        config = ExtractorConfig(text_model=str(tiny_bert))
        written = extract_text(read_entities(src), config, out)
        header, records = load_vectors(out)
        assert written == 2 and len(records) == 2
        assert header["dim"] == 32
        assert header["modality"] == "text"

    def test_identical_texts_identical_vectors(self, tmp_path, tiny_bert):
        src = tmp_path / "products.jsonl"
        write_products(src, ["crunchy kale snack", "crunchy kale snack"])
        out = tmp_path / "text.jsonl"
        extract_text(read_entities(src), ExtractorConfig(text_model=str(tiny_bert)), out)
        _, records = load_vectors(out)
        np.testing.assert_array_equal(records["p0"], records["p1"])

    def test_similarity_ordering(self, tmp_path, tiny_bert):
        src = tmp_path / "products.jsonl"
        write_products(src, ["fresh apple fruit", "apple", "steel pipe"])
        out = tmp_path / "text.jsonl"
        extract_text(read_entities(src), ExtractorConfig(text_model=str(tiny_bert)), out)
        _, records = load_vectors(out)
        assert cosine(records["p0"], records["p1"]) > cosine(records["p0"], records["p2"])


def save_png(path: Path, seed: int, size=24, **save_kw):
    rng = np.random.default_rng(seed)
    data = (rng.random((size, size, 3)) * 255).astype("uint8")
    Image.fromarray(data).save(path, format="PNG", **save_kw)
    return data


class TestExtractImage:
    def entities(self, tmp_path, specs):
        rows = []
        for name, ref in specs:
            rows.append(Entity(entity_id=name, image_ref=ref))
        return rows

    def test_corrupt_image_skipped_and_listed(self, tmp_path, tiny_vit):
        save_png(tmp_path / "a.png", 1)
        save_png(tmp_path / "b.png", 2)
        (tmp_path / "c.png").write_bytes(b"not an image")
        entities = self.entities(tmp_path, [("a", "a.png"), ("b", "b.png"), ("c", "c.png")])
        out = tmp_path / "image.jsonl"
        written, skipped = extract_image(entities, ExtractorConfig(vision_model=str(tiny_vit)),
                                         out, base_dir=tmp_path)
        assert written == 2
        assert [s["entity_id"] for s in skipped] == ["c"]
        skiplist = json.loads((tmp_path / "image.jsonl.skiplist.json").read_text())
        assert len(skiplist) == 1

    def test_same_image_identical_vectors(self, tmp_path, tiny_vit):
        save_png(tmp_path / "a.png", 5)
        entities = self.entities(tmp_path, [("x", "a.png"), ("y", "a.png")])
        out = tmp_path / "image.jsonl"
        extract_image(entities, ExtractorConfig(vision_model=str(tiny_vit)), out,
                      base_dir=tmp_path)
        _, records = load_vectors(out)
        np.testing.assert_array_equal(records["x"], records["y"])

    def test_lossless_reencode_high_similarity(self, tmp_path, tiny_vit):
        data = save_png(tmp_path / "a.png", 9)
        # lossless re-encode: different compression level, identical pixels
        Image.fromarray(data).save(tmp_path / "b.png", format="PNG", compress_level=9)
        entities = self.entities(tmp_path, [("a", "a.png"), ("b", "b.png")])
        out = tmp_path / "image.jsonl"
        extract_image(entities, ExtractorConfig(vision_model=str(tiny_vit)), out,
                      base_dir=tmp_path)
        _, records = load_vectors(out)
        assert cosine(records["a"], records["b"]) > 0.99

    def test_all_undecodable_fails(self, tmp_path, tiny_vit):
        (tmp_path / "c.png").write_bytes(b"junk")
        entities = self.entities(tmp_path, [("c", "c.png")])
        with pytest.raises(RuntimeError, match="no decodable images"):
            extract_image(entities, ExtractorConfig(vision_model=str(tiny_vit)),
                          tmp_path / "image.jsonl", base_dir=tmp_path)


class TestValidateOutput:
    def test_valid_file_ok(self, tmp_path, tiny_bert):
        src = tmp_path / "products.jsonl"
        write_products(src, ["apple", "oat"])
        out = tmp_path / "text.jsonl"
        extract_text(read_entities(src), ExtractorConfig(text_model=str(tiny_bert)), out)
        assert validate_output(out) == []

    def test_wrong_dim_names_line(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text("\n".join([
            json.dumps({"format": "moerec-embeddings", "version": 1,
                        "modality": "text", "dim": 3}),
            json.dumps({"entity_id": "a", "values": [0.0, 1.0, 2.0]}),
            json.dumps({"entity_id": "b", "values": [0.0, 1.0]}),
        ]) + "\n")
        violations = validate_output(path)
        assert len(violations) == 1 and ":3:" in violations[0]

    def test_missing_header(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text(json.dumps({"entity_id": "a", "values": [0.0]}) + "\n")
        assert any("format" in v for v in validate_output(path))


class TestConsumerContract:
    def test_output_loads_in_primary_unmodified(self, tmp_path, tiny_bert, tiny_vit):
        from moerec.encoders import load_embeddings

        src = tmp_path / "products.jsonl"
        write_products(src, ["fresh apple fruit", "apple", "steel pipe",
                             "oat pack", "crunchy kale snack"])
        text_out = tmp_path / "text.jsonl"
        extract_text(read_entities(src), ExtractorConfig(text_model=str(tiny_bert)), text_out)
        result = load_embeddings(text_out)
        assert len(result.records) == 5
        assert result.dim == 32
        assert result.modality == "text"

        for i in range(5):
            save_png(tmp_path / f"img{i}.png", i)
        entities = [Entity(f"p{i}", image_ref=f"img{i}.png") for i in range(5)]
        image_out = tmp_path / "image.jsonl"
        extract_image(entities, ExtractorConfig(vision_model=str(tiny_vit)), image_out,
                      base_dir=tmp_path)
        result = load_embeddings(image_out)
        assert len(result.records) == 5
        assert result.modality == "image"


class TestCli:
    def test_text_round_trip(self, tmp_path, tiny_bert):
        src = tmp_path / "products.jsonl"
        write_products(src, ["apple", "steel pipe"])
        out = tmp_path / "text.jsonl"
        code = main(["--modality", "text", "--input", str(src),
                     "--model", str(tiny_bert), "--out", str(out)])
        assert code == 0
        assert validate_output(out) == []

    def test_image_round_trip(self, tmp_path, tiny_vit):
        save_png(tmp_path / "a.png", 3)
        src = tmp_path / "users.jsonl"
        src.write_text(json.dumps({"user_id": "u1", "image_ref": "a.png"}) + "\n")
        out = tmp_path / "image.jsonl"
        code = main(["--modality", "image", "--input", str(src),
                     "--model", str(tiny_vit), "--out", str(out)])
        assert code == 0

    def test_model_load_failure_nonzero_exit(self, tmp_path):
        src = tmp_path / "products.jsonl"
        write_products(src, ["apple"])
        code = main(["--modality", "text", "--input", str(src),
                     "--model", str(tmp_path / "no-such-model"),
                     "--out", str(tmp_path / "o.jsonl")])
        assert code == 1
