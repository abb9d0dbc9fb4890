"""Registries for the open vocabularies: actions, structural tags, platforms, languages.

Action ids, locus tags, platform levels, and language families are all open
sets seeded with a kernel-engineering vocabulary.  Everything scope matching
touches goes through a :class:`Registry` instance so tests and the sim domain
can extend the vocabulary without monkey-patching module globals.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import InvalidAction

DEFAULT_STRUCTURAL_TAGS = (
    "loop_nest",
    "global_memory_op",
    "smem_stage",
    "launch_config",
    "intrinsic_site",
    "tunable_slot",
    "other",
)


@dataclass(frozen=True)
class ActionInfo:
    """One entry of the action-category vocabulary.

    ``requires`` is the soft prior over application order: the actions that
    are normally in place before this one is applied.  It is advisory; the
    gate, not the registry, decides what is actually legal.
    """

    id: str
    structural_tag: str = "other"
    requires: frozenset[str] = frozenset()
    languages: str = "*"
    platforms: str = "*"
    note: str = ""


# Seed vocabulary: common staging/compute/expression-level kernel actions.
DEFAULT_ACTIONS = (
    ActionInfo("tile_sm_stage", "loop_nest", note="tile loops, stage reused tiles in shared memory"),
    ActionInfo("vectorize_global", "global_memory_op", note="widen aligned contiguous global accesses"),
    ActionInfo("cp_async_pipeline", "smem_stage", frozenset({"tile_sm_stage"}), platforms="nv-sm80+"),
    ActionInfo("tma_load", "smem_stage", frozenset({"tile_sm_stage"}), platforms="nv-sm90+"),
    ActionInfo("warp_specialize", "launch_config", frozenset({"cp_async_pipeline"}), platforms="nv-sm90+"),
    ActionInfo("ldmatrix_swizzle", "intrinsic_site", frozenset({"tile_sm_stage"}), platforms="nv-sm80+"),
    ActionInfo("mma", "intrinsic_site", frozenset({"ldmatrix_swizzle"}), platforms="nv-sm80+"),
    ActionInfo("wgmma", "intrinsic_site", frozenset({"ldmatrix_swizzle"}), platforms="nv-sm90+"),
    ActionInfo("smem_transpose", "smem_stage", note="transpose strided scan axis into shared memory"),
    ActionInfo("gemm_phase_decomposition", "loop_nest", note="restructure per-token work into cooperative GEMM phases"),
    ActionInfo("radix_select", "loop_nest", note="coarse + refine selection passes"),
    ActionInfo("templatize", "tunable_slot", note="hoist constants into tunable template slots"),
    ActionInfo("autotune", "tunable_slot", frozenset({"templatize"})),
)

# Linear capability order per vendor family; later entries subsume earlier ones.
DEFAULT_PLATFORM_FAMILIES: dict[str, tuple[str, ...]] = {
    "sim": ("sim",),
    "nv": ("nv-sm80", "nv-sm90", "nv-sm120"),
}

# Shorthand scope entries seen in the wild, normalized to lower-bound form.
PLATFORM_ALIASES = {
    "nv-a+": "nv-sm80+",
    "nv-h+": "nv-sm90+",
    "nv-hopper": "nv-sm90",
}

DEFAULT_LANGUAGE_FAMILIES = (
    frozenset({"cuda", "cpp"}),
    frozenset({"triton", "tilelang"}),
)


@dataclass
class Registry:
    """Mutable bundle of the four vocabularies used for scope matching."""

    actions: dict[str, ActionInfo] = field(default_factory=dict)
    structural_tags: set[str] = field(default_factory=set)
    platform_families: dict[str, tuple[str, ...]] = field(default_factory=dict)
    language_families: list[frozenset[str]] = field(default_factory=list)

    def register_action(self, info: ActionInfo) -> None:
        self.actions[info.id] = info
        self.structural_tags.add(info.structural_tag)

    def register_structural_tag(self, tag: str) -> None:
        self.structural_tags.add(tag)

    def register_platform_family(self, family: str, levels: tuple[str, ...]) -> None:
        self.platform_families[family] = levels

    def register_language_family(self, members: frozenset[str]) -> None:
        self.language_families.append(frozenset(m.lower() for m in members))

    def action(self, action_id: str) -> ActionInfo:
        try:
            return self.actions[action_id]
        except KeyError:
            raise InvalidAction(f"unknown action category: {action_id!r}") from None

    def has_action(self, action_id: str) -> bool:
        return action_id in self.actions

    def soft_requires(self, action_id: str) -> frozenset[str]:
        info = self.actions.get(action_id)
        return info.requires if info is not None else frozenset()

    def soft_dependents(self, action_id: str) -> set[str]:
        return {a.id for a in self.actions.values() if action_id in a.requires}

    # -- platform capability order -------------------------------------------------

    def platform_level(self, platform: str) -> tuple[str, int] | None:
        """(family, index) of a concrete platform, or None if unregistered."""
        name = PLATFORM_ALIASES.get(platform.lower(), platform.lower())
        for family, levels in self.platform_families.items():
            if name in levels:
                return family, levels.index(name)
        return None

    def platform_matches(self, target: str, entry: str) -> bool:
        """True when ``target`` satisfies a scope entry.

        Entries are ``*`` (any platform), a concrete level (exact match), or a
        lower bound written ``<level>+`` which matches every platform at or
        above that level within the same family.  Matching is reflexive and
        transitive along the registered per-family order.
        """
        entry = PLATFORM_ALIASES.get(entry.lower(), entry.lower())
        if entry == "*":
            return True
        lower_bound = entry.endswith("+")
        entry_name = entry[:-1] if lower_bound else entry
        target_at = self.platform_level(target)
        entry_at = self.platform_level(entry_name)
        if target_at is None or entry_at is None:
            return target.lower() == entry_name
        if target_at[0] != entry_at[0]:
            return False
        if lower_bound:
            return target_at[1] >= entry_at[1]
        return target_at[1] == entry_at[1]

    # -- language families -----------------------------------------------------------

    def language_similarity(self, a: str, b: str) -> float:
        """1.0 exact, 0.5 same registered family, else 0.0."""
        a, b = a.lower(), b.lower()
        if a == b:
            return 1.0
        for family in self.language_families:
            if a in family and b in family:
                return 0.5
        return 0.0


    # -- persistence -------------------------------------------------------------

    def to_dict(self) -> dict[str, object]:
        return {
            "actions": [
                {
                    "id": a.id,
                    "structural_tag": a.structural_tag,
                    "requires": sorted(a.requires),
                    "languages": a.languages,
                    "platforms": a.platforms,
                    "note": a.note,
                }
                for a in sorted(self.actions.values(), key=lambda a: a.id)
            ],
            "structural_tags": sorted(self.structural_tags),
            "platform_families": {k: list(v) for k, v in sorted(self.platform_families.items())},
            "language_families": sorted(sorted(f) for f in self.language_families),
        }

    def merge_dict(self, data: dict[str, object]) -> None:
        for entry in data.get("actions", []):
            self.register_action(
                ActionInfo(
                    id=entry["id"],
                    structural_tag=entry.get("structural_tag", "other"),
                    requires=frozenset(entry.get("requires", [])),
                    languages=entry.get("languages", "*"),
                    platforms=entry.get("platforms", "*"),
                    note=entry.get("note", ""),
                )
            )
        self.structural_tags.update(data.get("structural_tags", []))
        for family, levels in data.get("platform_families", {}).items():
            self.platform_families.setdefault(family, tuple(levels))
        for members in data.get("language_families", []):
            family = frozenset(members)
            if family not in self.language_families:
                self.language_families.append(family)


def default_registry() -> Registry:
    reg = Registry()
    reg.structural_tags.update(DEFAULT_STRUCTURAL_TAGS)
    for info in DEFAULT_ACTIONS:
        reg.register_action(info)
    reg.platform_families.update(DEFAULT_PLATFORM_FAMILIES)
    reg.language_families.extend(DEFAULT_LANGUAGE_FAMILIES)
    return reg
