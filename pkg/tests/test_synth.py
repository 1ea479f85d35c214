import json

from maadvisor.model import load_schema
from maadvisor.sqltext import load_workload_document
from maadvisor.synth import SyntheticInstanceSpec, generate_instance, write_instance


def test_generation_deterministic():
    spec = SyntheticInstanceSpec(seed=0)
    schema_a, workload_a = generate_instance(spec)
    schema_b, workload_b = generate_instance(spec)
    assert schema_a == schema_b
    assert workload_a == workload_b


def test_write_instance_deterministic(tmp_path):
    spec = SyntheticInstanceSpec(seed=0)
    first = tmp_path / "first"
    second = tmp_path / "second"
    write_instance(spec, first)
    write_instance(spec, second)
    assert (first / "schema.json").read_bytes() == (second / "schema.json").read_bytes()
    assert (first / "workload.json").read_bytes() == (second / "workload.json").read_bytes()


def test_files_round_trip_to_in_memory_instance(tmp_path):
    spec = SyntheticInstanceSpec(seed=13)
    schema_path, workload_path = write_instance(spec, tmp_path)
    schema = load_schema(schema_path.read_text())
    workload = load_workload_document(workload_path.read_text(), schema)
    mem_schema, mem_workload = generate_instance(spec)
    assert schema == mem_schema
    assert [q.usages for q in workload.queries] == [q.usages for q in mem_workload.queries]
    assert [q.base_cost for q in workload.queries] == [q.base_cost for q in mem_workload.queries]


def test_query_count_honoured():
    spec = SyntheticInstanceSpec(seed=3, query_count=(10, 10))
    _, workload = generate_instance(spec)
    assert len(workload.queries) == 10


def test_validation_sweep_over_seeds(tmp_path):
    # generated instances always load and reference only schema columns
    for seed in range(50):
        spec = SyntheticInstanceSpec(seed=seed)
        schema_path, workload_path = write_instance(spec, tmp_path / str(seed))
        schema = load_schema(schema_path.read_text())
        workload = load_workload_document(workload_path.read_text(), schema)
        assert workload.queries
        for query in workload.queries:
            assert query.base_cost and query.base_cost > 0
            for usage in query.usages:
                assert schema.has_column(usage.table, usage.column)
        pairs = {(u.table, u.column) for q in workload.queries for u in q.usages}
        assert len(pairs) <= schema.column_count()
