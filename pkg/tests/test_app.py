import io

import numpy as np
import pytest
from PIL import Image

import app as service
from rose.models.detector import Detector
from rose.models.network import init_weights
from rose.utils.image_io import encode_pgm


@pytest.fixture
def client(small_config, monkeypatch):
    monkeypatch.setattr(service, 'detector', Detector(init_weights(small_config, seed=0)))
    service.app.config['TESTING'] = True
    with service.app.test_client() as client:
        yield client


def pgm_upload(height=40, width=40):
    pixels = np.random.default_rng(0).integers(0, 256, (height, width), dtype=np.uint8)
    return io.BytesIO(encode_pgm(pixels)), 'finger.pgm'


def test_health(client):
    response = client.get('/api/health')
    assert response.status_code == 200
    body = response.get_json()
    assert body['status'] == 'ok'
    assert body['loaded'] is True


def test_detect_pgm(client):
    response = client.post('/api/detect', data={'image': pgm_upload(), 'nms_min': '0.0'},
                           content_type='multipart/form-data')
    assert response.status_code == 200
    body = response.get_json()
    assert body['image'] == 'finger.pgm'
    assert body['points']
    assert all(p['x'] < 40 and p['y'] < 40 for p in body['points'])


def test_detect_png(client):
    buffer = io.BytesIO()
    Image.fromarray(np.full((32, 32), 200, dtype=np.uint8)).save(buffer, format='PNG')
    buffer.seek(0)
    response = client.post('/api/detect', data={'image': (buffer, 'finger.png')},
                           content_type='multipart/form-data')
    assert response.status_code == 200
    assert set(response.get_json()) == {'image', 'points', 'time_ms'}


def test_missing_file(client):
    response = client.post('/api/detect', data={}, content_type='multipart/form-data')
    assert response.status_code == 400


@pytest.mark.parametrize('field, value', [('nms_min', '1.5'), ('nms_radius', '0'), ('nms_radius', 'wide')])
def test_rejects_bad_parameters(client, field, value):
    response = client.post('/api/detect', data={'image': pgm_upload(), field: value},
                           content_type='multipart/form-data')
    assert response.status_code == 400
    assert 'error' in response.get_json()


def test_rejects_unknown_format(client):
    response = client.post('/api/detect', data={'image': (io.BytesIO(b'GIF89a....'), 'x.gif')},
                           content_type='multipart/form-data')
    assert response.status_code == 400


def test_model_unavailable(client, monkeypatch):
    monkeypatch.setattr(service, 'detector', None)
    monkeypatch.setattr(service, 'load_model', lambda: False)
    response = client.post('/api/detect', data={'image': pgm_upload()}, content_type='multipart/form-data')
    assert response.status_code == 503
