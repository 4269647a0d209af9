//! Analysis/synthesis filters of the dual-tree transform.
//!
//! Level 1 uses Kingsbury's near-symmetric 13/19-tap biorthogonal pair
//! (`near_sym_b`); deeper levels use the 14-tap quarter-sample-shift
//! orthonormal pair (`qshift_b`). The level-1 values are the published
//! coefficient tables distributed with the reference DT-CWT toolboxes
//! (Cambridge University Signal Processing Group).
//!
//! The published `qshift_b` lowpass has a residual response of about 9e-7
//! at Nyquist, so its highpass partners leak that much DC. The `H0A` below
//! is the nearest 14-tap filter (taps move by at most 1.3e-7) that is
//! orthonormal to machine precision and has an exact Nyquist zero; the other
//! seven q-shift filters follow from it by reversal and alternating signs.

pub(crate) const H0O: [f64; 13] = [
    -0.0017578125,
    0.0,
    0.022265625,
    -0.046875,
    -0.0482421875,
    0.296875,
    0.55546875,
    0.296875,
    -0.0482421875,
    -0.046875,
    0.022265625,
    0.0,
    -0.0017578125,
];

pub(crate) const G0O: [f64; 19] = [
    7.062639508928571e-05,
    0.0,
    -0.0013419015066964285,
    -0.0018833705357142855,
    0.007156808035714285,
    0.023856026785714284,
    -0.05564313616071428,
    -0.05168805803571428,
    0.29975760323660716,
    0.5594308035714286,
    0.29975760323660716,
    -0.05168805803571428,
    -0.05564313616071428,
    0.023856026785714284,
    0.007156808035714285,
    -0.0018833705357142855,
    -0.0013419015066964285,
    0.0,
    7.062639508928571e-05,
];

pub(crate) const H1O: [f64; 19] = [
    -7.062639508928571e-05,
    0.0,
    0.0013419015066964285,
    -0.0018833705357142855,
    -0.007156808035714285,
    0.023856026785714284,
    0.05564313616071428,
    -0.05168805803571428,
    -0.29975760323660716,
    0.5594308035714286,
    -0.29975760323660716,
    -0.05168805803571428,
    0.05564313616071428,
    0.023856026785714284,
    -0.007156808035714285,
    -0.0018833705357142855,
    0.0013419015066964285,
    0.0,
    -7.062639508928571e-05,
];

pub(crate) const G1O: [f64; 13] = [
    -0.0017578125,
    -0.0,
    0.022265625,
    0.046875,
    -0.0482421875,
    -0.296875,
    0.55546875,
    -0.296875,
    -0.0482421875,
    0.046875,
    0.022265625,
    -0.0,
    -0.0017578125,
];

pub(crate) const H0A: [f64; 14] = [
    0.00325313145393785,
    -0.003883200384190766,
    0.034660230008252295,
    -0.03887268833066861,
    -0.1172040146570173,
    0.2752954831026908,
    0.7561455337234387,
    0.568810532359082,
    0.011865974004314637,
    -0.10671169218758104,
    0.023825382688208777,
    0.01702522337003519,
    -0.005439456034587537,
    -0.0045568767428200456,
];

pub(crate) const H0B: [f64; 14] = [
    -0.0045568767428200456,
    -0.005439456034587537,
    0.01702522337003519,
    0.023825382688208777,
    -0.10671169218758104,
    0.011865974004314637,
    0.568810532359082,
    0.7561455337234387,
    0.2752954831026908,
    -0.1172040146570173,
    -0.03887268833066861,
    0.034660230008252295,
    -0.003883200384190766,
    0.00325313145393785,
];

pub(crate) const G0A: [f64; 14] = [
    -0.0045568767428200456,
    -0.005439456034587537,
    0.01702522337003519,
    0.023825382688208777,
    -0.10671169218758104,
    0.011865974004314637,
    0.568810532359082,
    0.7561455337234387,
    0.2752954831026908,
    -0.1172040146570173,
    -0.03887268833066861,
    0.034660230008252295,
    -0.003883200384190766,
    0.00325313145393785,
];

pub(crate) const G0B: [f64; 14] = [
    0.00325313145393785,
    -0.003883200384190766,
    0.034660230008252295,
    -0.03887268833066861,
    -0.1172040146570173,
    0.2752954831026908,
    0.7561455337234387,
    0.568810532359082,
    0.011865974004314637,
    -0.10671169218758104,
    0.023825382688208777,
    0.01702522337003519,
    -0.005439456034587537,
    -0.0045568767428200456,
];

pub(crate) const H1A: [f64; 14] = [
    -0.0045568767428200456,
    0.005439456034587537,
    0.01702522337003519,
    -0.023825382688208777,
    -0.10671169218758104,
    -0.011865974004314637,
    0.568810532359082,
    -0.7561455337234387,
    0.2752954831026908,
    0.1172040146570173,
    -0.03887268833066861,
    -0.034660230008252295,
    -0.003883200384190766,
    -0.00325313145393785,
];

pub(crate) const H1B: [f64; 14] = [
    -0.00325313145393785,
    -0.003883200384190766,
    -0.034660230008252295,
    -0.03887268833066861,
    0.1172040146570173,
    0.2752954831026908,
    -0.7561455337234387,
    0.568810532359082,
    -0.011865974004314637,
    -0.10671169218758104,
    -0.023825382688208777,
    0.01702522337003519,
    0.005439456034587537,
    -0.0045568767428200456,
];

pub(crate) const G1A: [f64; 14] = [
    -0.00325313145393785,
    -0.003883200384190766,
    -0.034660230008252295,
    -0.03887268833066861,
    0.1172040146570173,
    0.2752954831026908,
    -0.7561455337234387,
    0.568810532359082,
    -0.011865974004314637,
    -0.10671169218758104,
    -0.023825382688208777,
    0.01702522337003519,
    0.005439456034587537,
    -0.0045568767428200456,
];

pub(crate) const G1B: [f64; 14] = [
    -0.0045568767428200456,
    0.005439456034587537,
    0.01702522337003519,
    -0.023825382688208777,
    -0.10671169218758104,
    -0.011865974004314637,
    0.568810532359082,
    -0.7561455337234387,
    0.2752954831026908,
    0.1172040146570173,
    -0.03887268833066861,
    -0.034660230008252295,
    -0.003883200384190766,
    -0.00325313145393785,
];
