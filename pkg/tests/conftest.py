import pytest

from mosgeom import backend


@pytest.fixture(params=backend.available_backends())
def kernel_backend(request, monkeypatch):
    """Run the test once per available kernel backend."""
    monkeypatch.setattr(backend, "kernels", backend.get_kernels(request.param))
    return request.param
