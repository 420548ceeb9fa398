import random

import pytest
from hypothesis import given, settings, strategies as st

from friendmesh import identity
from friendmesh.errors import AccessDenied, InvalidPath
from friendmesh.profile import (
    LogEntry,
    PermissionTable,
    Profile,
    merge_logs,
    op_add,
    op_perm,
    op_remove,
    op_set,
    reconcile,
)


def make_profile(owner="olive"):
    p = Profile(owner)
    p.apply_update(owner, "share_board", op_perm("write", ["fred"]), timestamp=1)
    return p


# -- apply_update --------------------------------------------------------------


def test_friend_write_bumps_version():
    p = make_profile()
    for i in range(4):
        p.apply_update("olive", "share_board", op_add(f"post{i}", b"hi"), timestamp=2 + i)
    assert p.versions["share_board"] == 5
    v = p.apply_update("fred", "share_board", op_add("post-f", b"from fred"), timestamp=10)
    assert v == 6
    assert p.versions["share_board"] == 6


def test_no_access_write_denied_version_unchanged():
    p = make_profile()
    p.apply_update("olive", "share_board", op_perm("no_access", ["mallory"]), timestamp=2)
    before = p.versions["share_board"]
    with pytest.raises(AccessDenied):
        p.apply_update("mallory", "share_board", op_add("spam", b"x"), timestamp=3)
    assert p.versions["share_board"] == before


def test_owner_writes_anywhere():
    p = make_profile()
    p.apply_update("olive", "info", op_set(b"status: here"), timestamp=2)
    p.apply_update("olive", "events", op_add("party", b"saturday"), timestamp=3)
    assert p.element("info").content == b"status: here"
    assert p.element("events/party").content == b"saturday"


def test_unknown_path_invalid():
    p = make_profile()
    with pytest.raises(InvalidPath):
        p.apply_update("olive", "no_such_component", op_set(b"x"), timestamp=2)
    with pytest.raises(InvalidPath):
        p.apply_update("olive", "share_board/ghost/deeper", op_set(b"x"), timestamp=2)


# -- check_permission -----------------------------------------------------------


def test_read_set_allows_read():
    p = make_profile()
    p.apply_update("olive", "share_board", op_perm("read", ["rita"]), timestamp=2)
    assert p.check_permission("rita", "share_board", "read")
    assert not p.check_permission("rita", "share_board", "write")


def test_individual_overrides_group():
    p = make_profile()
    p.apply_update("olive", "groups", op_add("buddies", b"gus,mallory"), timestamp=2)
    p.apply_update("olive", "share_board", op_perm("read", ["buddies"]), timestamp=3)
    p.apply_update("olive", "share_board", op_perm("no_access", ["mallory"]), timestamp=4)
    assert p.check_permission("gus", "share_board", "read")
    assert not p.check_permission("mallory", "share_board", "read")


def test_absent_user_default_deny():
    p = make_profile()
    assert not p.check_permission("stranger", "share_board", "read")


def precedence_oracle(ind, grp, mode):
    # Independent statement of the rule: individual entry > group entry >
    # default deny; no_access beats grants at equal specificity; write
    # implies read.
    def grants(entry):
        return entry == "write" or (entry == "read" and mode == "read")

    if ind != "absent":
        return False if ind == "no_access" else grants(ind)
    if grp != "absent":
        return False if grp == "no_access" else grants(grp)
    return False


@pytest.mark.parametrize("ind", ["absent", "read", "write", "no_access"])
@pytest.mark.parametrize("grp", ["absent", "read", "write", "no_access"])
@pytest.mark.parametrize("mode", ["read", "write"])
def test_precedence_matrix(ind, grp, mode):
    p = Profile("olive")
    p.apply_update("olive", "groups", op_add("crew", b"uma"), timestamp=1)
    if ind != "absent":
        p.apply_update("olive", "share_board", op_perm(ind, ["uma"]), timestamp=2)
    if grp != "absent":
        existing = p.element("share_board").permissions
        # Assign the group without clobbering the individual entry.
        if existing is None:
            p.apply_update("olive", "share_board", op_perm(grp, ["crew"]), timestamp=3)
        else:
            existing.assign(grp, {"crew"})
    assert p.check_permission("uma", "share_board", mode) == precedence_oracle(ind, grp, mode)


def test_deeper_element_overrides_component():
    p = make_profile()
    p.apply_update("olive", "share_board", op_add("visible", b"v"), timestamp=2)
    p.apply_update("olive", "share_board", op_perm("read", ["rita"]), timestamp=3)
    p.apply_update("olive", "share_board/visible", op_perm("no_access", ["rita"]), timestamp=4)
    assert p.check_permission("rita", "share_board", "read")
    assert not p.check_permission("rita", "share_board/visible", "read")


# -- pull_updates ----------------------------------------------------------------


def test_pull_empty_when_up_to_date():
    p = make_profile()
    p.apply_update("olive", "share_board", op_add("p1", b"a"), timestamp=2)
    p.apply_update("olive", "share_board", op_perm("read", ["rita"]), timestamp=3)
    vec = p.vector()
    digests = {c: p.prefix_digest(c, v) for c, v in vec.items()}
    assert p.pull_updates("rita", vec, digests) == []


def test_pull_returns_only_missing_entries():
    # Log-replay oracle: requester at share_board:3, host at 5 -> entries 4, 5.
    p = Profile("olive")
    p.apply_update("olive", "share_board", op_perm("read", ["rita"]), timestamp=1)
    for i in range(4):
        p.apply_update("olive", "share_board", op_add(f"p{i}", bytes([i])), timestamp=2 + i)
    assert p.versions["share_board"] == 5
    vec = {"share_board": 3}
    digests = {"share_board": p.prefix_digest("share_board", 3)}
    got = p.pull_updates("rita", vec, digests)
    assert [e.version for e in got] == [4, 5]
    # Oracle: replaying requester state + batch equals host state for that
    # component's readable entries.
    requester_log = [e for e in p.log if e.version <= 3]
    replayed = Profile.replay("olive", requester_log + got)
    assert replayed.element("share_board/p2").content == p.element("share_board/p2").content
    assert replayed.element("share_board/p3").content == p.element("share_board/p3").content


def test_pull_filters_unreadable_elements():
    p = Profile("olive")
    p.apply_update("olive", "share_board", op_perm("read", ["rita"]), timestamp=1)
    p.apply_update("olive", "events", op_add("secret-party", b"x"), timestamp=2)
    p.apply_update("olive", "share_board", op_add("public-post", b"y"), timestamp=3)
    got = p.pull_updates("rita", {}, None)
    assert all(e.path.startswith("share_board") for e in got)


def test_pull_digest_mismatch_triggers_full_component():
    p = Profile("olive")
    p.apply_update("olive", "share_board", op_perm("read", ["rita"]), timestamp=1)
    p.apply_update("olive", "share_board", op_add("p", b"z"), timestamp=2)
    got = p.pull_updates("rita", {"share_board": 2}, {"share_board": b"wrong-digest"})
    assert [e.version for e in got] == [1, 2]


# -- replay / merge ------------------------------------------------------------------


def test_replay_equivalence():
    p = make_profile()
    rng = random.Random(9)
    for i in range(30):
        component = rng.choice(["share_board", "events", "info"])
        if component == "info":
            p.apply_update("olive", "info", op_set(b"s%d" % i), timestamp=10 + i)
        else:
            p.apply_update("olive", component, op_add(f"e{i}", b"c%d" % i), timestamp=10 + i)
    replayed = Profile.replay("olive", p.log)
    assert replayed.canonical_encode() == p.canonical_encode()
    assert replayed.versions == p.versions


def test_reconcile_fast_forward():
    p = make_profile()
    p.apply_update("olive", "share_board", op_add("p1", b"a"), timestamp=2)
    ahead = Profile.replay("olive", p.log)
    ahead.apply_update("olive", "share_board", op_add("p2", b"b"), timestamp=3)
    merged = reconcile("olive", p.log, ahead.log)
    assert merged.canonical_encode() == ahead.canonical_encode()


def test_reconcile_is_identity_on_identical_logs():
    p = make_profile()
    p.apply_update("olive", "share_board", op_add("p1", b"a"), timestamp=2)
    merged = reconcile("olive", p.log, list(p.log))
    assert merged.canonical_encode() == p.canonical_encode()


def test_reconcile_two_divergent_comments():
    # Merge oracle: result must contain the set-union of operations.
    base = make_profile()
    base.apply_update("olive", "share_board", op_add("post", b"root"), timestamp=2)
    base.apply_update("olive", "share_board", op_perm("write", ["ann", "ben"]), timestamp=3)

    replica_a = Profile.replay("olive", base.log)
    replica_b = Profile.replay("olive", base.log)
    replica_a.apply_update("ann", "share_board/post", op_add("c-ann", b"from ann"), timestamp=10)
    replica_b.apply_update("ben", "share_board/post", op_add("c-ben", b"from ben"), timestamp=11)

    merged = reconcile("olive", replica_a.log, replica_b.log)
    ops_union = {e.content_key() for e in replica_a.log} | {e.content_key() for e in replica_b.log}
    assert {e.content_key() for e in merged.log} == ops_union
    assert merged.element("share_board/post/c-ann").content == b"from ann"
    assert merged.element("share_board/post/c-ben").content == b"from ben"
    # Versions advanced past all inputs and dense per component.
    sb = [e.version for e in merged.log if e.path.startswith("share_board")]
    assert sb == list(range(1, len(sb) + 1))


@settings(deadline=None, max_examples=40)
@given(st.integers(0, 2**30), st.integers(1, 8), st.integers(1, 8))
def test_merge_commutative_idempotent(seed, n_a, n_b):
    rng = random.Random(seed)
    base = Profile("olive")
    base.apply_update("olive", "share_board", op_perm("write", ["ann", "ben"]), timestamp=1)
    a = Profile.replay("olive", base.log)
    b = Profile.replay("olive", base.log)
    for i in range(n_a):
        a.apply_update("ann", "share_board", op_add(f"a{i}", bytes([rng.randrange(256)])), timestamp=rng.randrange(2, 50))
    for i in range(n_b):
        b.apply_update("ben", "share_board", op_add(f"b{i}", bytes([rng.randrange(256)])), timestamp=rng.randrange(2, 50))
    ab = merge_logs(a.log, b.log)
    ba = merge_logs(b.log, a.log)
    assert ab == ba
    assert merge_logs(ab, a.log) == ab
    assert merge_logs(ab) == ab
    assert reconcile("olive", a.log, b.log).canonical_encode() == reconcile("olive", b.log, a.log).canonical_encode()


@settings(deadline=None, max_examples=30)
@given(st.lists(st.tuples(st.sampled_from(["rita", "sam", "zed"]), st.integers(0, 50)), max_size=25))
def test_permission_soundness_fuzz(writes):
    # No batch ever contains an entry the requester cannot read.
    p = Profile("olive")
    p.apply_update("olive", "share_board", op_perm("read", ["rita"]), timestamp=1)
    p.apply_update("olive", "events", op_perm("no_access", ["rita"]), timestamp=2)
    for i, (author, ts) in enumerate(writes):
        p.apply_update("olive", random.Random(i).choice(["share_board", "events", "info"]), op_add(f"n{i}", b"x"), timestamp=3 + ts)
    for requester in ("rita", "sam"):
        for entry in p.pull_updates(requester, {}, None):
            assert p.check_permission(requester, entry.path, "read")


# -- private messages stay sealed -------------------------------------------------------


def test_private_messages_sealed_for_mirror():
    owner_keys = identity.generate_keypair("ec-p256")
    p = Profile("olive")
    plaintext = b"meet at noon"
    sealed = identity.seal(owner_keys.public_key, plaintext, owner_keys.algorithm_id)
    p.apply_update("olive", "private_messages", op_add("m1", sealed), timestamp=1)

    replica = Profile.replay("olive", p.log)
    assert plaintext not in replica.canonical_encode()
    stored = replica.element("private_messages/m1").content
    assert identity.open_sealed(owner_keys.private_key, stored, owner_keys.algorithm_id) == plaintext


def test_export_import_roundtrip():
    p = make_profile()
    p.apply_update("olive", "share_board", op_add("p1", b"hello"), timestamp=2)
    p.apply_update("olive", "share_board", op_remove("p1"), timestamp=3)
    p.apply_update("olive", "info", op_set(b"bio"), timestamp=4)
    blob = p.export_log()
    back = Profile.import_log(blob)
    assert back.canonical_encode() == p.canonical_encode()
    assert back.versions == p.versions


def test_canonical_text_import_rebuilds_tree():
    p = make_profile()
    p.apply_update("olive", "share_board", op_add("p1", b"hello"), timestamp=2)
    p.apply_update("olive", "share_board/p1", op_add("c1", b"nested"), timestamp=3)
    p.apply_update("olive", "info", op_set(b"bio"), timestamp=4)
    p.apply_update("olive", "events", op_perm("read", ["rita", "sam"]), timestamp=5)
    text = p.canonical_encode()
    rebuilt = Profile.canonical_decode(text)
    assert rebuilt.canonical_encode() == Profile.canonical_decode(rebuilt.canonical_encode()).canonical_encode()
    assert rebuilt.element("share_board/p1/c1").content == b"nested"
    assert rebuilt.element("info").content == b"bio"
    assert rebuilt.check_permission("rita", "events", "read")
    assert not rebuilt.check_permission("zed", "events", "read")
