import dataclasses

import numpy as np
import pytest

from profuse import register, splat_renderer, synth, triangulate
from profuse.matchgraph import build_graph, extract_proposals
from profuse.scene_model import Camera, ClusterConfig, RenderConfig

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def simple_camera(width=32, height=32, f=40.0, position=(0.0, 0.0, 0.0)) -> Camera:
    """Camera at ``position`` looking down +z with the principal point at the image centre."""
    K = np.array([[f, 0, width / 2], [0, f, height / 2], [0, 0, 1.0]])
    T = np.eye(4)
    T[:3, 3] = -np.asarray(position, dtype=np.float64)
    return Camera(K, T, width, height)


@dataclasses.dataclass
class PipelineRun:
    scene: synth.SynthScene
    gaussians: object
    hits: dict
    vis: dict
    proposals: object
    registration: register.Registration

    @property
    def registered(self):
        return self.registration.scene


def run_pipeline_in_memory(spec: synth.SynthSpec, stride: int = 2, render: RenderConfig = RenderConfig(),
                           cluster: ClusterConfig = ClusterConfig(), scale_factor: float = 0.3) -> PipelineRun:
    s = synth.generate_scene(spec)
    g = triangulate.init_gaussians(triangulate.extract_seeds(s.views, s.warps,
                                                             triangulate.SeedConfig(stride=stride)), scale_factor)
    hits = {v: splat_renderer.render_hits(g, c, render) for v, c in s.views.cameras.items()}
    vis = {v: splat_renderer.visibility_mask(h) for v, h in hits.items()}
    props = extract_proposals(build_graph(s.views, s.warps, vis, cluster), s.views, cluster)
    return PipelineRun(s, g, hits, vis, props, register.register_features(g, s.views, props, hits))


ZERO_NOISE = synth.SynthSpec(object_count=5, view_count=8, object_kind="mixed", seed=0)


@pytest.fixture(scope="session")
def zero_noise_run() -> PipelineRun:
    return run_pipeline_in_memory(ZERO_NOISE)


@pytest.fixture(scope="session")
def small_scene() -> synth.SynthScene:
    return synth.generate_scene(synth.SynthSpec(object_count=3, view_count=4, seed=7))
