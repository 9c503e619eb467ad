import json

import pytest
from hypothesis import given, strategies as st

from vc_intervene.annot_ingest import load_annotations, parse_coco, parse_tsv, presence_sets, to_tsv
from vc_intervene.errors import DanglingReference, MalformedJson, MalformedLine, MissingField


def coco_doc(annotations=None):
    return {
        "images": [{"id": 10}, {"id": 20}],
        "categories": [{"id": 1, "name": "cat"}, {"id": 5, "name": "dog"}, {"id": 9, "name": "sofa"}],
        "annotations": annotations if annotations is not None else [
            {"id": 100, "image_id": 10, "category_id": 1, "bbox": [0, 0, 5, 5]},
            {"id": 101, "image_id": 10, "category_id": 5, "bbox": [1, 1, 2, 3]},
            {"id": 102, "image_id": 20, "category_id": 9, "bbox": [0, 0, 4, 4]},
            {"id": 103, "image_id": 10, "category_id": 9, "bbox": [2, 2, 2, 2]},
            {"id": 104, "image_id": 20, "category_id": 1, "bbox": [3, 3, 1, 1]},
        ],
    }


FOUR_IMAGES = "1\tA\n1\tB\n1\tC\n2\tA\n2\tC\n3\tB\n3\tC\n4\tA\n4\tB\n4\tC\n"


class TestCoco:
    def test_two_images_three_categories(self):
        ds = parse_coco(json.dumps(coco_doc()).encode())
        assert len(ds.images) == 2
        assert ds.n_categories == 3
        assert ds.categories.names == ("cat", "dog", "sofa")
        # file order within an image is kept
        assert [r.region_id for r in ds.images[0].regions] == [100, 101, 103]
        assert [r.category for r in ds.images[0].regions] == [0, 1, 2]
        assert ds.images[0].regions[1].bbox == (1.0, 1.0, 2.0, 3.0)

    def test_empty_annotations(self):
        ds = parse_coco(json.dumps(coco_doc([])), min_distinct=1)
        assert ds.images == ()
        assert ds.provenance["images_excluded"] == 2

    def test_dangling_image(self):
        doc = coco_doc([{"image_id": 99, "category_id": 1, "bbox": [0, 0, 1, 1]}])
        with pytest.raises(DanglingReference):
            parse_coco(json.dumps(doc))

    def test_dangling_category(self):
        doc = coco_doc([{"image_id": 10, "category_id": 2, "bbox": [0, 0, 1, 1]}])
        with pytest.raises(DanglingReference):
            parse_coco(json.dumps(doc))

    def test_missing_field_names_field_and_index(self):
        doc = coco_doc()
        del doc["annotations"][3]["bbox"]
        with pytest.raises(MissingField) as err:
            parse_coco(json.dumps(doc))
        assert err.value.field == "bbox"
        assert err.value.index == 3

    def test_malformed(self):
        with pytest.raises(MalformedJson):
            parse_coco(b"{not json")

    def test_degenerate_boxes_dropped(self):
        doc = coco_doc([{"image_id": 10, "category_id": 1, "bbox": [0, 0, 0, 4]},
                        {"image_id": 10, "category_id": 5, "bbox": [0, 0, 2, 2]}])
        ds = parse_coco(json.dumps(doc))
        assert [r.category for r in ds.images[0].regions] == [1]

    def test_min_distinct_recorded(self):
        ds = parse_coco(json.dumps(coco_doc()), min_distinct=3)
        assert [img.image_id for img in ds.images] == [10]
        assert ds.provenance["images_excluded"] == 1


class TestTsv:
    def test_four_lines_two_images(self):
        ds = parse_tsv(b"1\tA\n1\tB\n2\tA\n2\tC\n")
        assert len(ds.images) == 2
        assert ds.categories.names == ("A", "B", "C")
        assert ds.images[0].regions[0].bbox == (0.0, 0.0, 1.0, 1.0)

    def test_comments_only(self):
        ds = parse_tsv(b"# header\n# nothing here\n")
        assert ds.images == () and ds.n_categories == 0

    def test_three_fields(self):
        with pytest.raises(MalformedLine) as err:
            parse_tsv(b"1\tA\n# c\n2\tB\textra\n")
        assert err.value.lineno == 3

    def test_load_from_path(self, tmp_path):
        p = tmp_path / "a.tsv"
        p.write_text(FOUR_IMAGES)
        assert len(load_annotations(p, "tsv").images) == 4


class TestPresenceSets:
    def test_dedup(self):
        ds = parse_tsv("1\tA\n1\tA\n1\tB\n")
        assert presence_sets(ds, 1) == [(1, frozenset({0, 1}))]

    def test_filter(self):
        ds = parse_tsv("1\tA\n1\tB\n")
        assert presence_sets(ds, 3) == []

    def test_four_image_fixture(self):
        ds = parse_tsv(FOUR_IMAGES)
        assert [i for i, _ in presence_sets(ds, 3)] == [1, 4]

    def test_bad_min_distinct(self):
        with pytest.raises(ValueError):
            presence_sets(parse_tsv(FOUR_IMAGES), 0)


labels = st.lists(st.tuples(st.integers(0, 6), st.sampled_from("abcdefg")), min_size=0, max_size=40)


@given(labels)
def test_tsv_round_trip(rows):
    text = "".join(f"{i}\t{n}\n" for i, n in rows)
    ds = parse_tsv(text)
    again = parse_tsv(to_tsv(ds))
    name = lambda d: {i: {d.categories.names[c] for c in s} for i, s in presence_sets(d, 1)}
    assert name(again) == name(ds)


@given(labels, st.randoms(use_true_random=False))
def test_region_order_irrelevant(rows, rnd):
    shuffled = list(rows)
    rnd.shuffle(shuffled)
    a = parse_tsv("".join(f"{i}\t{n}\n" for i, n in rows))
    b = parse_tsv("".join(f"{i}\t{n}\n" for i, n in shuffled))
    name = lambda d: {i: {d.categories.names[c] for c in s} for i, s in presence_sets(d, 1)}
    assert name(a) == name(b)
