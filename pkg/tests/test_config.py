import pytest

from orthoadapt import config as configmod
from orthoadapt.config import RunConfig, loads
from orthoadapt.data import DEFAULT_DOMAINS
from orthoadapt.engine import LR_PRESETS
from orthoadapt.errors import ConfigurationError
from orthoadapt.masking import Fill


class TestDefaults:
    def test_empty_text_is_default(self):
        assert loads("") == RunConfig()

    def test_adaptation_defaults(self):
        e = RunConfig().engine_config()
        assert e.rank == 32 and e.lam == 1.0 and e.ema == 0.999 and e.lr == 1e-4
        assert e.mask.grid_size == 32 and e.mask.ratio == 0.75 and e.mask.fill is Fill.ZERO
        assert e.scales == (0.5, 1.0, 1.5, 2.0) and e.betas == (0.9, 0.999)

    def test_domains_default(self):
        specs = RunConfig().data.domain_specs()
        assert [(s.name, s.kind, s.severity) for s in specs] == \
               [(d.name, d.kind, d.severity) for d in DEFAULT_DOMAINS]

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError):
            configmod.load(tmp_path / "nope.ini")

    def test_none_path(self):
        assert configmod.load(None) == RunConfig()


class TestParsing:
    def test_values_typed(self):
        cfg = loads("[adapt]\nrank = 8\nlam = 0.5\north = false\nscales = 1.0, 2.0\n")
        assert cfg.adapt.rank == 8 and cfg.adapt.lam == 0.5 and cfg.adapt.orth is False
        assert cfg.adapt.scales == (1.0, 2.0)

    def test_inline_comment(self):
        assert loads("[run]\nseed = 7  # master seed\n").seed == 7

    def test_fill_none_disables_mask(self):
        assert loads("[adapt]\nfill = none\n").engine_config().mask is None

    @pytest.mark.parametrize("text", [
        "[adapt]\nrnak = 4\n",
        "[adaptation]\nrank = 4\n",
        "[adapt]\nrank = four\n",
        "[adapt]\nbatch = 2\n",
        "[adapt]\nfill = grey\n",
        "[run]\npreset = fast\n",
        "[data]\ndomains = fog:smoke:0.5\n",
        "[data]\ndomains = fog:fog:1.5\n",
        "[data]\ndomains = fog:fog:0.5, fog:dark:0.5\n",
        "[data]\nheight = 15\n",
        "[pretrain]\nepochs = -1\n",
        "no section header\n",
    ])
    def test_rejected(self, text):
        with pytest.raises(ConfigurationError):
            loads(text)

    def test_error_names_key(self):
        with pytest.raises(ConfigurationError, match="rnak"):
            loads("[adapt]\nrnak = 4\n")


class TestRoundTrip:
    def test_dumps_loads(self):
        cfg = loads("[adapt]\nrank = 8\nlam = 0.1\n[data]\nrounds = 2\n[toy]\nwidths = 4, 8, 8\n")
        assert loads(cfg.dumps()) == cfg

    def test_dumps_lists_every_section(self):
        text = RunConfig().dumps()
        for section in configmod.SECTIONS:
            assert f"[{section}]" in text

    def test_echo(self, tmp_path):
        path = RunConfig().echo(tmp_path)
        assert loads(path.read_text()) == RunConfig()


class TestOverrides:
    def test_seed(self):
        assert RunConfig().with_overrides(seed=9).seed == 9

    @pytest.mark.parametrize("preset", sorted(LR_PRESETS))
    def test_preset_sets_lr(self, preset):
        cfg = RunConfig().with_overrides(preset=preset)
        assert cfg.run.preset == preset and cfg.engine_config().lr == LR_PRESETS[preset]

    def test_none_changes_nothing(self):
        assert RunConfig().with_overrides() == RunConfig()
