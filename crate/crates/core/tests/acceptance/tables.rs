//! Published success rates (%) and mean completion times (s), per task in
//! study order; columns are vision, VR, exoskeleton, motion capture.

pub type Cell = (f64, Option<f64>);

pub const SIM: [[Cell; 4]; 10] = [
    [(80.0, Some(13.64)), (100.0, Some(15.32)), (90.0, Some(16.42)), (100.0, Some(6.32))],
    [(100.0, Some(34.66)), (100.0, Some(15.54)), (100.0, Some(12.69)), (100.0, Some(7.34))],
    [(80.0, Some(33.00)), (100.0, Some(12.46)), (90.0, Some(20.28)), (100.0, Some(7.87))],
    [(40.0, Some(56.50)), (80.0, Some(21.67)), (80.0, Some(16.91)), (90.0, Some(11.19))],
    [(70.0, Some(35.96)), (100.0, Some(12.51)), (100.0, Some(15.48)), (100.0, Some(14.52))],
    [(60.0, Some(52.75)), (100.0, Some(15.13)), (90.0, Some(17.86)), (100.0, Some(9.97))],
    [(0.0, None), (0.0, None), (80.0, Some(21.06)), (100.0, Some(14.70))],
    [(50.0, Some(36.64)), (100.0, Some(9.62)), (100.0, Some(7.85)), (90.0, Some(16.36))],
    [(10.0, Some(24.87)), (90.0, Some(41.72)), (80.0, Some(37.86)), (100.0, Some(11.38))],
    [(0.0, None), (70.0, Some(57.32)), (80.0, Some(23.92)), (100.0, Some(12.63))],
];

pub const REAL: [[Cell; 4]; 10] = [
    [(100.0, Some(14.41)), (100.0, Some(15.29)), (90.0, Some(18.47)), (100.0, Some(10.44))],
    [(70.0, Some(30.79)), (100.0, Some(9.82)), (100.0, Some(9.77)), (100.0, Some(8.31))],
    [(80.0, Some(14.95)), (100.0, Some(10.16)), (100.0, Some(8.48)), (100.0, Some(6.12))],
    [(40.0, Some(24.79)), (70.0, Some(14.32)), (80.0, Some(15.22)), (90.0, Some(11.33))],
    [(60.0, Some(23.11)), (100.0, Some(13.57)), (80.0, Some(12.43)), (100.0, Some(6.91))],
    [(20.0, Some(26.21)), (90.0, Some(13.86)), (60.0, Some(16.75)), (100.0, Some(8.18))],
    [(0.0, None), (0.0, None), (70.0, Some(24.82)), (90.0, Some(12.90))],
    [(40.0, Some(26.34)), (100.0, Some(11.18)), (100.0, Some(5.49)), (100.0, Some(12.02))],
    [(10.0, Some(53.34)), (90.0, Some(36.32)), (80.0, Some(22.43)), (100.0, Some(17.97))],
    [(0.0, None), (80.0, Some(24.31)), (70.0, Some(27.49)), (100.0, Some(16.47))],
];
