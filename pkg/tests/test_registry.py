from __future__ import annotations

import pytest

from deoptkit.errors import InvalidAction
from deoptkit.registry import ActionInfo, default_registry


@pytest.fixture
def registry():
    return default_registry()


class TestPlatformOrder:
    def test_reflexive(self, registry):
        for platform in ("sim", "nv-sm80", "nv-sm90", "nv-sm120"):
            assert registry.platform_matches(platform, platform)

    def test_lower_bound_matches_at_and_above(self, registry):
        assert registry.platform_matches("nv-sm80", "nv-sm80+")
        assert registry.platform_matches("nv-sm90", "nv-sm80+")
        assert registry.platform_matches("nv-sm120", "nv-sm80+")
        assert not registry.platform_matches("nv-sm80", "nv-sm90+")

    def test_transitive_along_order(self, registry):
        # nv-sm120 >= nv-sm90 and nv-sm90 >= nv-sm80 imply nv-sm120 >= nv-sm80
        assert registry.platform_matches("nv-sm120", "nv-sm90+")
        assert registry.platform_matches("nv-sm90", "nv-sm80+")
        assert registry.platform_matches("nv-sm120", "nv-sm80+")

    def test_aliases(self, registry):
        assert registry.platform_matches("nv-sm80", "NV-A+")
        assert registry.platform_matches("nv-sm90", "NV-H+")
        assert not registry.platform_matches("nv-sm80", "NV-H+")

    def test_cross_family_never_matches(self, registry):
        assert not registry.platform_matches("sim", "nv-sm80+")
        assert not registry.platform_matches("nv-sm90", "sim")

    def test_wildcard(self, registry):
        assert registry.platform_matches("sim", "*")
        assert registry.platform_matches("nv-sm120", "*")

    def test_exact_entry_is_not_a_bound(self, registry):
        assert not registry.platform_matches("nv-sm120", "nv-sm90")


class TestLanguageFamilies:
    @pytest.mark.parametrize(
        "a,b,score",
        [
            ("cuda", "cuda", 1.0),
            ("cuda", "cpp", 0.5),
            ("triton", "tilelang", 0.5),
            ("cuda", "triton", 0.0),
            ("sim", "cuda", 0.0),
        ],
    )
    def test_similarity(self, registry, a, b, score):
        assert registry.language_similarity(a, b) == score


class TestActionVocabulary:
    def test_extensible(self, registry):
        registry.register_action(ActionInfo("my_pass", "loop_nest", frozenset({"tile_sm_stage"})))
        assert registry.has_action("my_pass")
        assert registry.soft_requires("my_pass") == frozenset({"tile_sm_stage"})
        assert "my_pass" in registry.soft_dependents("tile_sm_stage")

    def test_unknown_action_raises(self, registry):
        with pytest.raises(InvalidAction):
            registry.action("does_not_exist")

    def test_roundtrips_through_dict(self, registry):
        registry.register_action(ActionInfo("extra", "other"))
        fresh = default_registry()
        fresh.merge_dict(registry.to_dict())
        assert fresh.has_action("extra")
        assert fresh.to_dict() == registry.to_dict()
