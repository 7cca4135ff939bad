import os
from dotenv import load_dotenv

load_dotenv()

# Runtime knobs
P2I_THREADS = os.getenv('P2I_THREADS', '1')
P2I_LOG_FILE = os.getenv('P2I_LOG_FILE', 'point2insert.log')
P2I_LOG_LEVEL = os.getenv('P2I_LOG_LEVEL', 'INFO')
DEFAULT_SEED = int(os.getenv('P2I_SEED', 0))

# Point map encoding
POSITIVE_VALUE = 1.0
NEGATIVE_VALUE = 0.5
BACKGROUND_VALUE = 0.0
DEFAULT_POINT_SIZE = 10
KEYFRAME_INTERVAL = 10

# Latent simulator shape law
SPATIAL_FACTOR = 8
TEMPORAL_GROUP = 4
LATENT_CHANNELS = 16
MODEL_INPUT_CHANNELS = 3 * LATENT_CHANNELS

# Loss weights and optimizer
LAMBDA1 = 1.5
LAMBDA2 = 1.2
ADAMW_BETAS = (0.9, 0.99)
ADAMW_EPS = 1e-8
FULL_SCALE_STAGE1_LR = 5e-5
FULL_SCALE_STAGE2_LR = 1e-5

# Desk-scale rate; the full-scale rates barely move a model this small
DESK_STAGE1_LR = 2e-3
STAGE2_LR_RATIO = FULL_SCALE_STAGE2_LR / FULL_SCALE_STAGE1_LR

# Guidance mixes
STAGE1_MASK_MIX = 0.8
STAGE2_GUIDANCE_MIX = {
    'mask': 0.10,
    'sparse': 0.30,
    'dense': 0.60,
}
SPARSE_MAX_POINTS = 3
DENSE_COVERAGE = 0.25

# Dataset admission
SCALE_FILTER_LOW = 0.005
SCALE_FILTER_HIGH = 0.50
INPAINT_TOLERANCE = 1e-4
INPAINT_ITERATIONS = 500
GENERATION_RETRY_BUDGET = 20

# Object classes; the tag index is the condition id fed to the denoiser
CLASS_TAGS = [
    'red_disk',
    'green_square',
    'blue_disk',
    'yellow_square',
]
CLASS_COLORS = {
    'red_disk': (0.9, 0.15, 0.1),
    'green_square': (0.1, 0.85, 0.2),
    'blue_disk': (0.15, 0.25, 0.95),
    'yellow_square': (0.95, 0.9, 0.1),
}

# Background alignment
ALIGN_DILATION_RADIUS = 4
ALIGN_FEATHER_WIDTH = 4

# Bench
DETECT_THRESHOLD = 0.08
DETECT_MIN_BLOB = 4
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
EWARP_BLOCK = 8
EWARP_SEARCH = 4
ABLATION_POINT_SIZES = [2, 6, 10, 20, 30]
SAMPLER_STEPS = 20
