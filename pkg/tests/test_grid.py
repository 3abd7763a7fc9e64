import pytest

from weaves import ModuleDef, dec_int, enc_int, partition_address_space
from weaves.errors import (
    InvalidSplitError,
    MissingModuleError,
    NotClosedError,
    RegionOverflowError,
    UnknownChannelError,
)
from weaves.grid import GridCheckpoint, GridSim, identify_islands, migrate_island
from util import idle, poke, spin_entry, two_mediator_tapestry


# --- address-space partitioning -----------------------------------------------


def test_partition_64_40():
    per_node, nodes = partition_address_space(64, 40)
    assert per_node == 2**40  # 1 TB
    assert nodes == 16_777_216


def test_partition_36_32():
    per_node, nodes = partition_address_space(36, 32)
    assert per_node == 2**32  # 4 GB
    assert nodes == 16


def test_partition_small_symmetric():
    assert partition_address_space(8, 4) == (16, 16)


def test_partition_product_covers_space():
    for total in (8, 16, 32, 40, 64):
        for vm in range(1, total):
            per_node, nodes = partition_address_space(total, vm)
            assert per_node * nodes == 2**total


def test_partition_invalid_split():
    with pytest.raises(InvalidSplitError):
        partition_address_space(32, 0)
    with pytest.raises(InvalidSplitError):
        partition_address_space(32, 32)
    with pytest.raises(InvalidSplitError):
        partition_address_space(32, 40)


def test_region_disjointness_across_allocations():
    sim = GridSim(total_bits=24, vm_bits=16)
    a = sim.add_node()
    b = sim.add_node()
    t_a, t_b = a.tapestry, b.tapestry
    t_a.register_module(ModuleDef("m", globals_=[("x", enc_int(0))], entries={"main": spin_entry(1)}))
    t_b.register_module(ModuleDef("m", globals_=[("x", enc_int(0))], entries={"main": spin_entry(1)}))
    ba = t_a.instantiate_bead("m")
    bb = t_b.instantiate_bead("m")
    addrs_a = {t_a.alloc(ba.bead_id, 64) for _ in range(50)}
    addrs_b = {t_b.alloc(bb.bead_id, 64) for _ in range(50)}
    assert not addrs_a & addrs_b
    assert all(a.region.contains(x) for x in addrs_a)
    assert all(b.region.contains(x) for x in addrs_b)


# --- reliable transport ----------------------------------------------------------


ROUNDS = 30


def rank_composer(out_chan, in_chan, rounds=ROUNDS, record=None):
    def make_entry():
        def entry(ctx):
            acc = 0
            for r in range(rounds):
                ctx.send(out_chan, enc_int(r))
                payload = yield from ctx.recv(in_chan)
                got = dec_int(payload)
                if record is not None:
                    record.append(got)
                acc += got * (r + 1)
                ctx.set_int("acc", acc)
                yield
        return entry

    def build(t):
        t.register_module(ModuleDef("rank", globals_=[("acc", enc_int(0))],
                                    entries={"exchange": make_entry()}))
        b = t.instantiate_bead("rank")
        w = t.define_weave([b.bead_id])
        t.spawn_string(w.weave_id, "exchange")
    return build


def exchange_sim(loss, seed=5, rounds=ROUNDS, records=None):
    sim = GridSim(total_bits=32, vm_bits=24, loss=loss, seed=seed)
    r0 = records[0] if records else None
    r1 = records[1] if records else None
    sim.add_node(composer=rank_composer("c01", "c10", rounds, r0))
    sim.add_node(composer=rank_composer("c10", "c01", rounds, r1))
    sim.add_channel("c01", 0, 1)
    sim.add_channel("c10", 1, 0)
    return sim


def test_lossless_delivery_no_retransmissions():
    rec = ([], [])
    sim = exchange_sim(0.0, records=rec)
    sim.run()
    assert rec[0] == list(range(ROUNDS))
    assert rec[1] == list(range(ROUNDS))
    assert sim.dropped == 0
    # every data message was transmitted exactly once
    assert all(v[1] == 1 for tx in sim.senders.values() for v in tx.unacked.values())


def test_lossy_delivery_exactly_once_in_order():
    for loss in (0.1, 0.3):
        rec = ([], [])
        sim = exchange_sim(loss, seed=11, records=rec)
        sim.run(max_ticks=50_000)
        assert rec[0] == list(range(ROUNDS)), loss
        assert rec[1] == list(range(ROUNDS)), loss
        assert sim.dropped > 0


def test_duplicate_injection_suppressed():
    rec = ([], [])
    sim = exchange_sim(0.0, records=rec)
    # inject duplicates of the first data message a few ticks in
    def dup(s):
        s.in_flight.append((s.tick + 1, "data", "c01", 1, enc_int(0), 9))
        s.in_flight.append((s.tick + 2, "data", "c01", 1, enc_int(0), 10))
    sim.at_tick(4, dup)
    sim.run()
    assert rec[1] == list(range(ROUNDS))


def test_send_on_foreign_channel_rejected():
    sim = exchange_sim(0.0)
    with pytest.raises(UnknownChannelError):
        sim.nodes[0].executor.transport.send("c10", b"x")
    with pytest.raises(UnknownChannelError):
        sim.nodes[0].executor.transport.send("nope", b"x")


def finals(sim):
    return tuple(sim.nodes[n].tapestry.get_int(0, "acc") for n in sorted(sim.nodes))


def test_partial_checkpoint_empty_network_exact_resume():
    sim = exchange_sim(0.0)
    sim.run()
    ref = finals(sim)
    sim2 = exchange_sim(0.0)
    # drain a couple of ticks, checkpoint at a quiet instant, restore, finish
    sim2.step_tick()
    cp = sim2.partial_checkpoint()
    sim3 = exchange_sim(0.0)
    sim3.restore_partial(cp)
    sim3.run()
    assert finals(sim3) == ref


def test_partial_checkpoint_recovers_in_flight_loss():
    for loss in (0.0, 0.1, 0.3):
        ref_sim = exchange_sim(loss, seed=23)
        ref_sim.run(max_ticks=50_000)
        ref = finals(ref_sim)
        for cut in (3, 9, 17):
            sim = exchange_sim(loss, seed=23)
            while sim.tick < cut:
                sim.step_tick()
            in_flight_then = len(sim.in_flight)
            blob = sim.partial_checkpoint().serialize()
            fresh = exchange_sim(loss, seed=23)
            fresh.restore_partial(GridCheckpoint.deserialize(blob))
            assert not fresh.in_flight  # in-flight state is dropped by design
            fresh.run(max_ticks=50_000)
            assert finals(fresh) == ref, (loss, cut, in_flight_then)


def test_partial_checkpoint_restores_onto_renumbered_nodes():
    ref_sim = exchange_sim(0.2, seed=31)
    ref_sim.run(max_ticks=50_000)
    ref = finals(ref_sim)

    sim = exchange_sim(0.2, seed=31)
    while sim.tick < 7:
        sim.step_tick()
    cp = sim.partial_checkpoint()

    remap = GridSim(total_bits=32, vm_bits=24, loss=0.2, seed=31)
    # same composition, different node numbering
    remap.add_node(node_id=2, composer=rank_composer("c01", "c10"))
    remap.add_node(node_id=3, composer=rank_composer("c10", "c01"))
    remap.add_channel("c01", 2, 3)
    remap.add_channel("c10", 3, 2)
    remap.restore_partial(cp, node_map={0: 2, 1: 3})
    remap.run(max_ticks=50_000)
    assert tuple(remap.nodes[n].tapestry.get_int(0, "acc") for n in (2, 3)) == ref


def test_retransmission_interval_preserved_across_restore():
    interval = 8
    sim = GridSim(total_bits=32, vm_bits=24, loss=0.0, seed=1, retransmit_interval=interval)
    sim.add_node(composer=rank_composer("c01", "c10", rounds=1))
    sim.add_node(composer=rank_composer("c10", "c01", rounds=1))
    sim.add_channel("c01", 0, 1)
    sim.add_channel("c10", 1, 0)
    sim.step_tick()  # both sides send their first message
    assert sim.senders["c01"].unacked
    # lose everything currently in flight, then let the timer run part way
    sim.in_flight.clear()
    for _ in range(3):
        sim.step_tick()
        sim.in_flight.clear()  # keep the wire silent while the timer runs
    timer_before = sim.senders["c01"].timer
    assert 0 < timer_before < interval
    due_in = interval - timer_before

    cp = sim.partial_checkpoint()
    fresh = GridSim(total_bits=32, vm_bits=24, loss=0.0, seed=1, retransmit_interval=interval)
    fresh.add_node(composer=rank_composer("c01", "c10", rounds=1))
    fresh.add_node(composer=rank_composer("c10", "c01", rounds=1))
    fresh.add_channel("c01", 0, 1)
    fresh.add_channel("c10", 1, 0)
    fresh.restore_partial(cp)
    assert fresh.senders["c01"].timer == timer_before
    # the retransmission fires exactly `due_in` ticks after the restore
    fired_at = None
    for k in range(1, interval * 2):
        fresh.step_tick()
        if any(m[1] == "data" and m[2] == "c01" for m in fresh.in_flight):
            fired_at = k
            break
        fresh.in_flight.clear()
    assert fired_at == due_in


# --- islands and migration ----------------------------------------------------------


def test_two_mediator_topology_yields_two_islands():
    t, s, (m12, m34), weaves, strings = two_mediator_tapestry()
    islands = identify_islands(t)
    bead_sets = sorted(tuple(sorted(i.bead_ids)) for i in islands)
    assert bead_sets == [
        (s[0].bead_id, s[1].bead_id, m12.bead_id),
        (s[2].bead_id, s[3].bead_id, m34.bead_id),
    ]
    for island in islands:
        assert len(island.weave_ids) == 2
        assert len(island.string_ids) == 2


def test_fully_connected_tapestry_single_island():
    from weaves import Tapestry

    t = Tapestry()
    t.register_module(ModuleDef("m", globals_=[("x", enc_int(0))], entries={"main": spin_entry(1)}))
    beads = [t.instantiate_bead("m") for _ in range(4)]
    t.define_weave([b.bead_id for b in beads])
    islands = identify_islands(t)
    assert len(islands) == 1
    assert islands[0].bead_ids == {b.bead_id for b in beads}


def test_hint_splitting_shared_bead_rejected():
    t, s, (m12, m34), weaves, strings = two_mediator_tapestry()
    with pytest.raises(NotClosedError) as err:
        identify_islands(t, hints=[{s[0].bead_id}])
    a, b = err.value.edge
    assert a == s[0].bead_id and b in (s[1].bead_id, m12.bead_id)


def test_allocation_reference_joins_islands():
    from weaves import Tapestry
    from weaves.scheduler import Executor

    t = Tapestry()

    def maker(ctx):
        addr = ctx.alloc(16)
        ctx.mem_write(addr, b"payload-bytes-xx")
        ctx.set_addr("ptr", addr)
        yield

    def reader(ctx):
        yield

    t.register_module(ModuleDef("mk", globals_=[("ptr", enc_int(0))], entries={"go": maker}))
    t.register_module(ModuleDef("rd", globals_=[("spare", enc_int(0))], entries={"go": reader}))
    b_mk = t.instantiate_bead("mk")
    b_rd = t.instantiate_bead("rd")
    w1 = t.define_weave([b_mk.bead_id])
    w2 = t.define_weave([b_rd.bead_id])
    t.spawn_string(w1.weave_id, "go")
    Executor(t).run()
    # two disconnected weaves, so two islands
    assert len(identify_islands(t)) == 2
    # repoint the allocation to the other bead: now one island via the reference
    addr = t.get_int(w1.weave_id, "ptr")
    t.allocs.live_record(addr).bead_id = b_rd.bead_id
    islands = identify_islands(t)
    assert len(islands) == 1


def migration_sim(group_size=None):
    sim = GridSim(total_bits=32, vm_bits=24, loss=0.0, seed=2,
                  region_group_size=group_size)

    def build_src(t):
        def worker(ctx):
            addr = ctx.alloc(32)
            ctx.mem_write(addr, b"A" * 32)
            ctx.set_addr("ptr", addr)
            ctx.set_addr("ptr_alias", addr)
            for i in range(30):
                v = ctx.get_int("count")
                ctx.set_int("count", v + i)
                total = yield from ctx.call("poke", 1)
                ctx.set_int("seen", total)
                yield

        t.register_module(ModuleDef(
            "worker",
            globals_=[("count", enc_int(0)), ("seen", enc_int(0)),
                      ("ptr", enc_int(0)), ("ptr_alias", enc_int(0))],
            entries={"work": worker},
        ))
        t.register_module(ModuleDef("hub", globals_=[("m_total", enc_int(0))],
                                    entries={"idle": idle}, exports={"poke": poke}))
        wb = t.instantiate_bead("worker")
        hb = t.instantiate_bead("hub")
        w = t.define_weave([wb.bead_id, hb.bead_id])
        t.spawn_string(w.weave_id, "work")

    def build_dst(t):
        # target節 already has the code modules registered, but no beads
        def worker(ctx):
            yield

        t.register_module(ModuleDef(
            "worker",
            globals_=[("count", enc_int(0)), ("seen", enc_int(0)),
                      ("ptr", enc_int(0)), ("ptr_alias", enc_int(0))],
            entries={"work": worker},
        ))
        t.register_module(ModuleDef("hub", globals_=[("m_total", enc_int(0))],
                                    entries={"idle": idle}, exports={"poke": poke}))

    sim.add_node(composer=build_src)
    sim.add_node(composer=build_dst)
    return sim


def migration_finals(t):
    weave_id = sorted(t.weaves)[0]
    return (
        t.get_int(weave_id, "count"),
        t.get_int(weave_id, "seen"),
        t.get_int(weave_id, "m_total"),
    )


def test_migration_preserves_behavior_and_addresses():
    ref = migration_sim()
    ref.run()
    expected = migration_finals(ref.nodes[0].tapestry)

    sim = migration_sim()
    for _ in range(4):
        sim.step_tick()
    src_t = sim.nodes[0].tapestry
    addr_before = src_t.get_int(sorted(src_t.weaves)[0], "ptr")
    island = identify_islands(src_t)[0]
    migrate_island(sim, island, 0, 1)
    assert not sim.nodes[0].tapestry.strings
    sim.run()
    dst_t = sim.nodes[1].tapestry
    assert migration_finals(dst_t) == expected
    wid = sorted(dst_t.weaves)[0]
    # aliased address-valued cells still agree and resolve with no rewriting
    assert dst_t.get_int(wid, "ptr") == addr_before
    assert dst_t.get_int(wid, "ptr_alias") == addr_before
    assert dst_t.mem_read(addr_before) == b"A" * 32
    # the adopted address still lives in the source node's region
    assert sim.nodes[0].region.contains(addr_before)


def test_kill_node_then_restore_recovers():
    # run a while, checkpoint, kill one node: the survivor ends up orphaned
    # and the run terminates; restoring the checkpoint onto a fresh grid
    # finishes with the reference result
    ref = exchange_sim(0.1, seed=41)
    ref.run(max_ticks=50_000)
    expected = finals(ref)

    sim = exchange_sim(0.1, seed=41)
    while sim.tick < 6:
        sim.step_tick()
    cp = sim.partial_checkpoint()
    sim.kill_node(1)
    sim.run(max_ticks=5_000)  # terminates: node 0 is orphaned, node 1 dead
    survivor = sim.nodes[0].tapestry
    assert any(s.status == "blocked" for s in survivor.strings.values())

    fresh = exchange_sim(0.1, seed=41)
    fresh.restore_partial(cp)
    fresh.run(max_ticks=50_000)
    assert finals(fresh) == expected


def test_migration_missing_module_rejected():
    sim = GridSim(total_bits=32, vm_bits=24)

    def build_src(t):
        t.register_module(ModuleDef("m", globals_=[("x", enc_int(0))],
                                    entries={"main": spin_entry(2)}))
        b = t.instantiate_bead("m")
        w = t.define_weave([b.bead_id])
        t.spawn_string(w.weave_id, "main")

    sim.add_node(composer=build_src)
    sim.add_node()  # empty target: module not registered
    island = identify_islands(sim.nodes[0].tapestry)[0]
    with pytest.raises(MissingModuleError):
        migrate_island(sim, island, 0, 1)


def test_migration_across_region_groups_rejected():
    sim = migration_sim(group_size=1)  # every node is its own group
    island = identify_islands(sim.nodes[0].tapestry)[0]
    with pytest.raises(RegionOverflowError):
        migrate_island(sim, island, 0, 1)
