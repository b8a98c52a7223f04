import pytest

from config import ConfigError, load_service_config


def write(tmp_path, text, name="feedql.ini"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return str(path)


def test_full_config(tmp_path):
    (tmp_path / "photos.atom").write_text("", encoding="utf-8")
    (tmp_path / "photos.hidden.tsv").write_text("", encoding="utf-8")
    path = write(tmp_path, """
[service]
bind = 0.0.0.0:8080
base_uri = https://feeds.example.org/

[collection photos]
atom = photos.atom
hidden = photos.hidden.tsv
page_size = 20
archive_size = 50
tier = keyed
keys = k1, k2

[feedset local]
sources = http://a.test/feeds/a http://b.test/feeds/b
""")
    service = load_service_config(path)
    assert (service.host, service.port) == ("0.0.0.0", 8080)
    assert service.public_base == "https://feeds.example.org"
    photos = service.collections["photos"]
    assert photos.atom == str(tmp_path / "photos.atom")
    assert (photos.page_size, photos.archive_size) == (20, 50)
    assert (photos.tier, photos.keys) == ("keyed", ("k1", "k2"))
    assert service.feedsets["local"].sources == ("http://a.test/feeds/a", "http://b.test/feeds/b")


def test_public_base_falls_back_to_bind(tmp_path):
    service = load_service_config(write(tmp_path, "[service]\nbind = localhost:9000\nbase_uri =\n"))
    assert service.public_base == "http://localhost:9000"


@pytest.mark.parametrize("text, message", [
    ("[feedset a]\nsources = http://x\n[feedset a]\nsources = http://y\n", "duplicate section [feedset a]"),
    ("[collection news]\natom = missing.atom\n", "no such file"),
    ("[feedset a]\nsources = http://x\ntier = keyed\n", "needs at least one key"),
    ("[feedset a]\nsources = http://x\ntier = premium\n", "expected open or keyed"),
    ("[feedset a]\nsources = http://x http://x\n", "origin listed twice"),
    ("[feedset a]\n", "at least one origin"),
    ("[service]\nbind = 8000\n", "expected host:port"),
    ("[service]\ncolour = blue\n", "unknown key"),
    ("[mirror a]\n", "unknown section"),
])
def test_config_errors(tmp_path, text, message):
    with pytest.raises(ConfigError) as excinfo:
        load_service_config(write(tmp_path, text))
    assert message in str(excinfo.value)


def test_bad_page_size(tmp_path):
    (tmp_path / "news.atom").write_text("", encoding="utf-8")
    with pytest.raises(ConfigError) as excinfo:
        load_service_config(write(tmp_path, "[collection news]\natom = news.atom\npage_size = 0\n"))
    assert "page_size" in str(excinfo.value)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_service_config(str(tmp_path / "absent.ini"))
