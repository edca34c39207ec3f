import json

import numpy as np
import pytest

from outfitnet.comparison import ItemType, ITEM_TYPES
from outfitnet.data import (GeneratorConfig, Outfit, SLOT_ORDER, generate,
                            load_dataset, load_outfit, load_split, make_fitb,
                            mean_images, pad_outfit, read_ppm, rule_holds,
                            sample_negative, save_dataset, save_outfit,
                            save_split, write_ppm)
from outfitnet.errors import (ConfigError, DataError, FormatError, IoError,
                              PoolError)


@pytest.fixture(scope="module")
def small_cfg():
    return GeneratorConfig(n_outfits={"train": 40, "val": 8, "test": 8}, seed=123)


@pytest.fixture(scope="module")
def dataset(small_cfg):
    return generate(small_cfg)


class TestGenerate:
    def test_deterministic(self, small_cfg, dataset):
        again = generate(GeneratorConfig(n_outfits=dict(small_cfg.n_outfits), seed=123))
        for split in dataset:
            a, b = dataset[split], again[split]
            assert list(a.items) == list(b.items)
            for iid in a.items:
                assert np.array_equal(a.items[iid].image, b.items[iid].image)
            assert [[i.id for i in o.items] for o in a.outfits] == \
                   [[i.id for i in o.items] for o in b.outfits]

    def test_positives_satisfy_rule(self, dataset):
        for split in dataset.values():
            for o in split.outfits:
                assert o.label == 1
                assert rule_holds(o.items)

    def test_outfit_sizes_and_types(self, dataset):
        sizes = set()
        for o in dataset["train"].outfits:
            sizes.add(len(o.items))
            o.validate()
        assert sizes == {3, 4, 5}

    def test_images_in_unit_range(self, dataset):
        for it in dataset["val"].items.values():
            assert it.image.shape == (3, 32, 32)
            assert it.image.min() >= 0.0 and it.image.max() <= 1.0

    def test_tokens_name_attributes(self, dataset):
        it = next(iter(dataset["train"].items.values()))
        assert len(it.tokens) == 3
        assert it.type.label in it.tokens

    def test_five_distinct_silhouettes(self):
        from outfitnet.data import _SILHOUETTES
        assert len(_SILHOUETTES) == 5
        masks = [m.tobytes() for m in _SILHOUETTES.values()]
        assert len(set(masks)) == 5

    def test_invalid_config(self):
        with pytest.raises(ConfigError):
            generate(GeneratorConfig(n_outfits={"train": 0}))
        with pytest.raises(ConfigError):
            generate(GeneratorConfig(palettes=1))
        with pytest.raises(ConfigError):
            generate(GeneratorConfig(textures=99))

    def test_split_hygiene(self, dataset):
        seen = set()
        for split in dataset.values():
            ids = set(split.items)
            assert not (ids & seen)
            seen |= ids


class TestSampleNegative:
    def test_single_slot_differs(self, dataset):
        rng = np.random.default_rng(0)
        pos = dataset["train"].outfits[0]
        neg = sample_negative(pos, dataset["train"], rng)
        diffs = [i for i, (a, b) in enumerate(zip(pos.items, neg.items))
                 if a.id != b.id]
        assert diffs == [neg.fault]
        assert neg.label == 0

    def test_type_multiset_preserved(self, dataset):
        rng = np.random.default_rng(1)
        for pos in dataset["train"].outfits[:10]:
            neg = sample_negative(pos, dataset["train"], rng)
            assert neg.types() == pos.types()

    def test_rule_broken(self, dataset):
        rng = np.random.default_rng(2)
        for pos in dataset["train"].outfits[:20]:
            neg = sample_negative(pos, dataset["train"], rng)
            assert not rule_holds(neg.items)

    def test_small_pool_rejected(self, dataset):
        rng = np.random.default_rng(3)
        pos = dataset["train"].outfits[0]
        tiny = dataset["train"]
        starved = type(tiny)(split="train",
                             items={pos.items[0].id: pos.items[0]},
                             outfits=[pos], config=tiny.config)
        with pytest.raises(PoolError):
            sample_negative(pos, starved, rng)


class TestMeanImagesAndPadding:
    def test_singleton_mean_is_item(self, dataset):
        m = dataset["train"]
        t = ItemType.TOP
        tops = m.items_of_type(t)
        solo = type(m)(split="x", items={tops[0].id: tops[0], **{
            i.id: i for i in m.items.values() if i.type != t}},
            outfits=[], config=m.config)
        means = mean_images(solo)
        assert np.array_equal(means[t], tops[0].image)

    def test_two_image_mean(self, dataset):
        m = dataset["train"]
        tops = m.items_of_type(ItemType.TOP)[:2]
        expect = (tops[0].image + tops[1].image) / 2.0
        got = np.mean([tops[0].image, tops[1].image], axis=0)
        assert np.allclose(got, expect, atol=1e-15)

    def test_means_in_unit_range(self, dataset):
        means = mean_images(dataset["train"])
        for img in means.values():
            assert img.min() >= 0.0 and img.max() <= 1.0

    def test_missing_type_rejected(self, dataset):
        m = dataset["train"]
        no_bags = type(m)(split="x",
                          items={i.id: i for i in m.items.values()
                                 if i.type != ItemType.BAG},
                          outfits=[], config=m.config)
        with pytest.raises(DataError):
            mean_images(no_bags)

    def test_full_outfit_unchanged(self, dataset):
        means = mean_images(dataset["train"])
        full = next(o for o in dataset["train"].outfits if len(o.items) == 5)
        padded = pad_outfit(full, means)
        assert padded.present.all()
        assert [it.type for it in padded.items] == list(SLOT_ORDER)

    def test_three_item_outfit_two_padded(self, dataset):
        means = mean_images(dataset["train"])
        small = next(o for o in dataset["train"].outfits if len(o.items) == 3)
        padded = pad_outfit(small, means)
        assert int(padded.present.sum()) == 3
        for s, t in enumerate(SLOT_ORDER):
            if not padded.present[s]:
                assert np.array_equal(padded.items[s].image, means[t])

    def test_padding_idempotent(self, dataset):
        means = mean_images(dataset["train"])
        small = next(o for o in dataset["train"].outfits if len(o.items) == 3)
        once = pad_outfit(small, means)
        again = pad_outfit(Outfit(items=[it for s, it in enumerate(once.items)
                                         if once.present[s]],
                                  label=once.label), means)
        assert np.array_equal(once.present, again.present)
        for a, b in zip(once.items, again.items):
            assert np.array_equal(a.image, b.image)

    def test_fault_slot_mapped(self, dataset):
        rng = np.random.default_rng(4)
        means = mean_images(dataset["train"])
        pos = dataset["train"].outfits[1]
        neg = sample_negative(pos, dataset["train"], rng)
        padded = pad_outfit(neg, means)
        assert padded.fault_slot is not None
        assert padded.items[padded.fault_slot].id == neg.items[neg.fault].id


class TestFitb:
    def test_exactly_one_rule_satisfying_option(self, dataset):
        rng = np.random.default_rng(5)
        for pos in dataset["train"].outfits[:15]:
            q = make_fitb(pos, dataset["train"], rng)
            winners = [i for i, opt in enumerate(q.options)
                       if rule_holds(q.question.items + [opt])]
            assert winners == [q.answer_index]

    def test_options_same_type(self, dataset):
        rng = np.random.default_rng(6)
        q = make_fitb(dataset["train"].outfits[0], dataset["train"], rng)
        assert all(opt.type == q.blank_type for opt in q.options)
        assert len({opt.id for opt in q.options}) == 4

    def test_answer_index_roughly_uniform(self, dataset):
        rng = np.random.default_rng(7)
        counts = np.zeros(4)
        for _ in range(400):
            pos = dataset["train"].outfits[int(rng.integers(len(dataset["train"].outfits)))]
            q = make_fitb(pos, dataset["train"], rng)
            counts[q.answer_index] += 1
        assert counts.min() > 60  # each position ~100 of 400

    def test_insufficient_pool(self, dataset):
        rng = np.random.default_rng(8)
        pos = dataset["train"].outfits[0]
        starved = type(dataset["train"])(
            split="x", items={i.id: i for i in pos.items},
            outfits=[pos], config=dataset["train"].config)
        with pytest.raises(PoolError):
            make_fitb(pos, starved, rng)


class TestPpm:
    def test_round_trip_quantization_bound(self, tmp_path):
        rng = np.random.default_rng(9)
        img = rng.uniform(size=(3, 32, 32))
        write_ppm(tmp_path / "x.ppm", img)
        back = read_ppm(tmp_path / "x.ppm")
        assert np.abs(back - img).max() <= 1.0 / 510.0 + 1e-12

    def test_truncated_rejected(self, tmp_path):
        rng = np.random.default_rng(10)
        write_ppm(tmp_path / "x.ppm", rng.uniform(size=(3, 32, 32)))
        raw = (tmp_path / "x.ppm").read_bytes()
        (tmp_path / "bad.ppm").write_bytes(raw[:100])
        with pytest.raises(FormatError) as exc:
            read_ppm(tmp_path / "bad.ppm")
        assert exc.value.offset is not None

    def test_bad_magic_rejected(self, tmp_path):
        (tmp_path / "bad.ppm").write_bytes(b"P3\n2 2\n255\nxxxx")
        with pytest.raises(FormatError):
            read_ppm(tmp_path / "bad.ppm")

    def test_missing_file(self, tmp_path):
        with pytest.raises(IoError):
            read_ppm(tmp_path / "absent.ppm")


class TestManifestIo:
    def test_round_trip_metadata_exact(self, dataset, tmp_path):
        save_split(dataset["val"], tmp_path / "val")
        back = load_split(tmp_path / "val")
        assert list(back.items) == sorted(dataset["val"].items)
        for iid, item in back.items.items():
            orig = dataset["val"].items[iid]
            assert item.type == orig.type
            assert item.tokens == orig.tokens
            assert item.palette_id == orig.palette_id
            assert item.texture_id == orig.texture_id
        assert [[i.id for i in o.items] for o in back.outfits] == \
               [[i.id for i in o.items] for o in dataset["val"].outfits]
        assert all(o.label == 1 and o.fault is None for o in back.outfits)

    def test_round_trip_pixel_bound(self, dataset, tmp_path):
        save_split(dataset["val"], tmp_path / "val")
        back = load_split(tmp_path / "val")
        for iid, item in back.items.items():
            orig = dataset["val"].items[iid]
            assert np.abs(item.image - orig.image).max() <= 1.0 / 510.0 + 1e-12

    def test_save_deterministic_bytes(self, dataset, tmp_path):
        save_split(dataset["test"], tmp_path / "a")
        save_split(dataset["test"], tmp_path / "b")
        assert (tmp_path / "a/manifest.json").read_bytes() == \
               (tmp_path / "b/manifest.json").read_bytes()

    def test_corrupt_manifest(self, tmp_path):
        d = tmp_path / "val"
        d.mkdir()
        (d / "manifest.json").write_text("{not json")
        with pytest.raises(FormatError):
            load_split(d)

    def test_unknown_item_reference(self, dataset, tmp_path):
        save_split(dataset["val"], tmp_path / "val")
        doc = json.loads((tmp_path / "val/manifest.json").read_text())
        doc["outfits"][0]["items"][0] = "ghost-item"
        (tmp_path / "val/manifest.json").write_text(json.dumps(doc))
        with pytest.raises(FormatError):
            load_split(tmp_path / "val")

    def test_load_dataset_all_splits(self, dataset, tmp_path):
        save_dataset(dataset, tmp_path)
        back = load_dataset(tmp_path)
        assert set(back) == {"train", "val", "test"}

    def test_outfit_round_trip(self, dataset, tmp_path):
        outfit = dataset["test"].outfits[0]
        save_outfit(outfit, tmp_path / "one")
        back = load_outfit(tmp_path / "one")
        assert [i.id for i in back.items] == [i.id for i in outfit.items]
        assert back.label == outfit.label
        assert rule_holds(back.items)
