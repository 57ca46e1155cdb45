from flask import Flask, request, jsonify
from rose.config import configure_logging, get_settings
from rose.errors import RoseError
from rose.models.detector import Detector
from rose.models.weights_io import load_weights
from rose.utils.image_io import decode_image, to_unit_range
import logging

configure_logging()
logger = logging.getLogger(__name__)

app = Flask(__name__)

detector = None

def load_model():
    """Load the detector weights when the application starts"""
    global detector
    settings = get_settings()
    try:
        weights = load_weights(settings.weights_path, settings.network_config())
        detector = Detector(weights, nms_radius=settings.nms_radius, nms_min=settings.nms_min)
        logger.info(f"Successfully loaded weights from {settings.weights_path}")
        return True
    except (RoseError, OSError) as e:
        logger.error(f"Error loading weights: {e}", exc_info=True)
        detector = None
        return False

@app.route('/api/health')
def health():
    """API endpoint reporting whether the detector is ready"""
    return jsonify({
        'status': 'ok',
        'weights': get_settings().weights_path,
        'loaded': detector is not None
    })

@app.route('/api/detect', methods=['POST'])
def detect():
    """API endpoint to detect singular points in an uploaded fingerprint"""
    try:
        upload = request.files.get('image')
        if upload is None:
            logger.error("Request without an 'image' file")
            return jsonify({'error': "Missing 'image' file"}), 400

        settings = get_settings()
        try:
            radius = float(request.values.get('nms_radius', settings.nms_radius))
            min_value = float(request.values.get('nms_min', settings.nms_min))
        except (ValueError, TypeError) as e:
            logger.error(f"Invalid parameter values: {e}")
            return jsonify({'error': 'Invalid parameter values'}), 400

        if not (0 < radius <= 200):
            logger.error(f"NMS radius out of range: {radius}")
            return jsonify({'error': 'nms_radius must be between 0 and 200 pixels'}), 400

        if not (0.0 <= min_value <= 1.0):
            logger.error(f"NMS minimum out of range: {min_value}")
            return jsonify({'error': 'nms_min must be between 0 and 1'}), 400

        try:
            pixels = decode_image(upload.read(), upload.filename or 'upload')
        except RoseError as e:
            logger.error(f"Could not decode upload {upload.filename}: {e}")
            return jsonify({'error': f'Could not decode image: {e}'}), 400

        if detector is None:
            logger.warning("Detector not loaded, attempting to load")
            if not load_model():
                logger.error("Failed to load weights")
                return jsonify({'error': 'Model not loaded'}), 503

        logger.debug(f"Detecting on {upload.filename}: {pixels.shape}, radius={radius}, min={min_value}")
        request_detector = Detector(detector.weights, nms_radius=radius, nms_min=min_value)
        output = request_detector.detect(to_unit_range(pixels), name=upload.filename or 'upload')

        return jsonify(output.to_dict())

    except Exception as e:
        logger.error(f"Error in detect: {e}", exc_info=True)
        return jsonify({'error': str(e)}), 500

if __name__ == '__main__':
    if not load_model():
        logger.warning("Failed to load initial weights")
    app.run(host='0.0.0.0', port=5000, debug=False)
