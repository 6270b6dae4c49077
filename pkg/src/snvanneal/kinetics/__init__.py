"""Stochastic implantation and laser-anneal simulator."""
from .model import (EnergyLandscape, K_B_EV, LineParams, RateModel, Species, deep_merge, default_config,
                    resolve_preset)
from .sites import (AnnealSegment, Event, SiteArray, SiteState, State, anneal, implant, read_event_log, replay,
                    run_segments, site_timeline, write_event_log)
