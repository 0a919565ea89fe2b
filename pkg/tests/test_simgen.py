import gzip

import pytest

from campaign_engine.ingest import load_identity_map
from campaign_engine.simgen import (
    BACKUP,
    CampaignAction,
    CampaignScript,
    HostSpec,
    NetworkSpec,
    SimulationError,
    build_scenario,
    fig6_network,
    fig6_scenario,
    generate_baseline,
    inject_campaign,
    scenario_from_dict,
)


def small_network(seed=0):
    return NetworkSpec(
        hosts=[
            HostSpec("srv", "server", "10.1.0.2"),
            HostSpec("ws1", "client", "10.1.1.2", services=[("srv", 445)], domains=["a.example"]),
            HostSpec("ws2", "client", "10.1.1.3", services=[("srv", 445)]),
        ],
        cidr_labels={"10.1.1.0/24": "Users"},
        seed=seed,
    )


def files(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*.gz"))}


def test_generation_is_a_pure_function_of_the_seed(tmp_path):
    a = generate_baseline(small_network(1), 3, tmp_path / "a")
    b = generate_baseline(small_network(1), 3, tmp_path / "b")
    c = generate_baseline(small_network(2), 3, tmp_path / "c")
    assert files(a.root) == files(b.root)
    assert files(a.root) != files(c.root)
    assert a.count_records() > 0


def test_leases_cover_the_vpn_address(tmp_path):
    spec = fig6_network(0)
    c = generate_baseline(spec, 2, tmp_path)
    m = load_identity_map(c.identity_map_path)
    assert m.addresses("a") == ["10.42.24.11", "10.42.99.5"]


def test_injection_adds_files_only_on_campaign_days(tmp_path):
    c = generate_baseline(small_network(), 4, tmp_path)
    before = files(tmp_path)
    inject_campaign(c, CampaignScript([CampaignAction(2, "ws1", "collect", source="srv", volume=10**8)]))
    after = files(tmp_path)
    new = set(after) - set(before)
    assert [str(p) for p in new] == [f"flow/{c.day(2).strftime('%Y%m%d')}/campaign.txt.gz"]
    assert all(after[p] == before[p] for p in before)
    with gzip.open(tmp_path / next(iter(new)), "rt") as fh:
        lines = fh.read().splitlines()
    assert sum(int(l.split(",")[-1]) for l in lines) == 10**8


@pytest.mark.parametrize(
    "action",
    [
        CampaignAction(0, "ghost", "scan", count=1),
        CampaignAction(9, "ws1", "scan", count=1),
        CampaignAction(0, "ws1", "collect", source="ghost"),
        CampaignAction(0, "ws1", "teleport"),
    ],
)
def test_invalid_scripts(tmp_path, action):
    c = generate_baseline(small_network(), 2, tmp_path)
    with pytest.raises(SimulationError):
        inject_campaign(c, CampaignScript([action]))


def test_network_validation():
    with pytest.raises(SimulationError):
        NetworkSpec([HostSpec("x", "client", "10.0.0.1"), HostSpec("x", "client", "10.0.0.2")])
    with pytest.raises(SimulationError):
        NetworkSpec([HostSpec("x", "robot", "10.0.0.1")])
    with pytest.raises(SimulationError):
        generate_baseline(small_network(), 0, "/tmp/never")


def test_fig6_network_shape():
    spec = fig6_network(0)
    assert len(spec.hosts) == 20
    assert {"a", "b", "c", "d", "e", "f"} <= {h.name for h in spec.hosts}
    assert [h.name for h in spec.hosts if h.role == BACKUP] == ["backup01"]


def test_scenario_from_dict_custom_network():
    s = scenario_from_dict(
        {
            "network": {
                "days": 3,
                "seed": 4,
                "hosts": [{"name": "S", "role": "server", "ip": "10.0.0.2"}, {"name": "W", "role": "client", "ip": "10.0.0.3", "services": [["s", 22]]}],
                "profiles": {"client": {"request": {"median": 1000, "sigma": 0.1}}},
            },
            "campaign": [{"day": 2, "actor": "W", "kind": "collect", "source": "s", "volume": 5}],
        }
    )
    assert s.days == 3 and s.network.seed == 4
    assert s.network.profile("client").request.median == 1000
    assert s.script.actions[0].actor == "w"


def test_fig6_scenario_writes_config(tmp_path):
    c = build_scenario(fig6_scenario(0), tmp_path)
    text = c.config_path.read_text()
    assert "min_rows = 20" in text and 'identity_map = "leases.csv"' in text
