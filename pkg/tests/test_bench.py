from loghive.bench import run_bench
from loghive.warehouse import iter_records


def stored_batches(workdir, run_name, result):
    store = workdir / run_name / "store"
    return {d.device: [rec.batch for _, rec in iter_records(store, bytes.fromhex(d.device))] for d in result.devices}


def test_same_seed_gives_same_stored_batches(tmp_path):
    # receive times and CBE timestamps differ between runs; the batches must not
    a = run_bench(tmp_path, devices=2, bytes_per_device=150_000, fsync=False, run_name="a", batch_size=4)
    b = run_bench(tmp_path, devices=2, bytes_per_device=150_000, fsync=False, run_name="b", batch_size=4)
    first, second = stored_batches(tmp_path, "a", a), stored_batches(tmp_path, "b", b)
    assert first == second
    assert all(len(v) >= 2 for v in first.values())
    assert all(d.readback_ok for d in a.devices + b.devices)


def test_rerun_into_same_run_dir_starts_empty(tmp_path):
    for _ in range(2):
        r = run_bench(tmp_path, devices=1, bytes_per_device=10_000, fsync=False, run_name="same")
    d = r.devices[0]
    assert d.stored == d.batches and r.lost_batches == 0


def test_result_lines(tmp_path):
    r = run_bench(tmp_path, devices=1, bytes_per_device=5_000, fsync=False, ip_version=4)
    *devices, total = r.lines()
    assert devices[0].startswith(f"device={r.devices[0].device} bytes=")
    assert total.startswith("total devices=1 ipv=4 ") and total.endswith("lost=0 readback=ok")
