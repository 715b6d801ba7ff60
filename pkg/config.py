import os


class CONFIG:
    JOBS = int(os.getenv("SINGALIGN_JOBS", "1"))
    LOGGING_LEVEL = os.getenv("SINGALIGN_LOG_LEVEL", "INFO")
    LOG_FILE = os.getenv("SINGALIGN_LOG_FILE")

    SAMPLE_RATE = 16000

    # frontend
    WINDOW_S = 0.025
    SHIFT_S = 0.010
    NUM_MEL = 23
    NUM_CEPS = 13
    PREEMPHASIS = 0.97
    LOG_FLOOR = 1e-10
    CMVN_VAR_FLOOR = 1e-8
    DELTA_WINDOW = 2
    SPLICE_LEFT = 4
    SPLICE_RIGHT = 4

    PITCH_FMIN = 60.0
    PITCH_FMAX = 1000.0
    PITCH_WINDOW_S = 0.05
    PITCH_SHIFT_S = 0.01
    PITCH_VOICING_THRESHOLD = 0.5
    PITCH_SILENCE_RMS = 1e-4
    PITCH_BIN_HZ = 10.0

    MIN_FRAGMENT_S = 10.0
    MAX_FRAGMENT_S = 35.0

    SPEED_FACTORS_3FOLD = (0.9, 1.1)
    SPEED_FACTORS_5FOLD = (0.9, 0.95, 1.05, 1.1)

    # lexicon
    MAX_PROLONGED_VOWELS = 3

    # lm
    LM_ORDER = 3

    # acoustic model
    STATES_PER_PHONE = 3
    SILENCE_STATES = 5
    INITIAL_FORWARD_PROB = 0.5
    VAR_FLOOR_FRACTION = 1e-4
    TRANSITION_FLOOR = 0.01
    MIXUP_PERTURB = 0.1
    MIXUP_POWER = 0.2
    EM_ITERATIONS = 10
    TREE_MIN_LEAF_FRAMES = 20
    TREE_MIN_GAIN = 1e-3
    SELF_LOOP_SCALE = 0.9
    SILENCE_PROB = 0.5

    # adaptation
    FMLLR_MIN_OCCUPANCY = 200
    FMLLR_ITERATIONS = 20
    FMLLR_MIN_GAIN = 1e-6

    # decoding
    ACOUSTIC_SCALE = 0.1
    BEAM = 16.0
    MAX_ACTIVE = 2000
