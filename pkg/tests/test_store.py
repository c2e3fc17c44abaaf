import pytest

from codec import CodecError
from memory import EpisodeSummary
from store import DuplicateEpisode, LongTermStore, MissingEpisode, ingest, merge_deltas, replay
from world import CellState, LocalMapCache

OBST, FREE = int(CellState.OBSTACLE), int(CellState.FREE)


def _episode(uav: int, rnd: int, t: float = 0.0, deltas=()) -> EpisodeSummary:
    return EpisodeSummary(uav_id=uav, sync_round=rnd, timestamp=t, position=(0, 0),
                          obstacle_deltas=tuple(deltas))


def test_ingest_indexes_and_merges():
    lts = LongTermStore(8, 8)
    key = ingest(lts, _episode(1, 1, 2.0, [((3, 3), OBST)]))
    assert key == (1, 1)
    assert lts.retrieve(key).timestamp == 2.0
    assert lts.known_obstacles() == {(3, 3)}


def test_duplicate_rejected_and_counted():
    lts = LongTermStore(8, 8)
    ingest(lts, _episode(1, 1))
    with pytest.raises(DuplicateEpisode):
        ingest(lts, _episode(1, 1, 5.0))
    assert len(lts) == 1
    assert lts.duplicates == 1


def test_missing_episode():
    with pytest.raises(MissingEpisode):
        LongTermStore(4, 4).retrieve((0, 9))


def test_recent_is_per_uav_oldest_first():
    lts = LongTermStore(8, 8)
    for rnd in (2, 1, 3):
        ingest(lts, _episode(0, rnd))
    ingest(lts, _episode(1, 1))
    assert [e.sync_round for e in lts.recent(0, 2)] == [2, 3]
    assert lts.recent(0, 0) == []


def test_merge_is_last_writer_wins():
    known = LocalMapCache(4, 4)
    assert merge_deltas(known, [((1, 1), OBST)], 5.0) == [(1, 1)]
    # an older report does not overwrite
    assert merge_deltas(known, [((1, 1), FREE)], 3.0) == []
    assert known.known_obstacles() == {(1, 1)}
    # a newer one does
    assert merge_deltas(known, [((1, 1), FREE)], 7.0) == [(1, 1)]
    assert known.known_obstacles() == set()


def test_persistence_replays_to_same_state(tmp_path):
    path = tmp_path / "lts" / "episodes.bin"
    lts = LongTermStore(8, 8, path)
    ingest(lts, _episode(0, 1, 1.0, [((2, 2), OBST)]))
    ingest(lts, _episode(1, 1, 2.0, [((5, 5), OBST)]))

    again = replay(path, 8, 8)
    assert again.episodes == lts.episodes
    assert again.index == lts.index
    assert again.known_obstacles() == {(2, 2), (5, 5)}


def test_replay_rejects_truncated_file(tmp_path):
    path = tmp_path / "episodes.bin"
    lts = LongTermStore(8, 8, path)
    ingest(lts, _episode(0, 1))
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(CodecError):
        replay(path, 8, 8)


def test_four_uavs_five_rounds_index_twenty_keys(tmp_path):
    path = tmp_path / "episodes.bin"
    lts = LongTermStore(8, 8, path)
    for rnd in range(1, 6):
        for uav in range(4):
            ingest(lts, _episode(uav, rnd, float(rnd)))

    assert len(lts) == 20
    assert set(lts.index) == {(u, r) for u in range(4) for r in range(1, 6)}
    assert all(lts.retrieve((u, r)).uav_id == u for u, r in lts.index)
    assert len(replay(path, 8, 8)) == 20
