import os.path


def fixture_path(name: str) -> str:
    """Return the path of the fixture with the given name."""
    return os.path.join(os.path.dirname(__file__), "fixtures", name)


def fixture(name: str) -> str:
    """Read and return the contents of the fixture with the given name."""
    with open(fixture_path(name)) as f:
        return f.read()


def config_path(name: str) -> str:
    """Return the path of the shipped configuration with the given name."""
    return os.path.join(
        os.path.dirname(__file__), os.pardir, os.pardir, "configs", name
    )
