use apt_core::math::Matrix;
use apt_core::network::{AptNetwork, Mode, NetworkConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Train-mode output bits, recorded once from this implementation.
const GOLDEN: [u64; 24] = [
    0xbfee7cea59e98edb, 0xbfd07efd16eac1ac, 0xbff237d3db441572, 0xbfc3d6df4585919e,
    0x3fe05c700851bfa1, 0x3ff069bbe71648c8, 0xbff92efec9880172, 0xbfeaa4bf593b6bc8,
    0x3fc5a345c6bf9b50, 0x3fe38a15321287a8, 0x3fbc841074991b1e, 0x3ff0d66e6e4d6b2b,
    0xbff65bf0986d9bfd, 0xbff83ee4aa42a1ae, 0x3fe1a783aa1c501a, 0x40010c76124d0b22,
    0x3fa1418e839a8068, 0xbfed4a96a69d26d3, 0x3fe4df25a7f5077e, 0xbff15b92859cb8f6,
    0x3fec5b7128897859, 0x3fe5aa518658b1d0, 0x3ff65b3cf479d966, 0xbfe78d18eff8c0c5,
];

/// Seeded network with a live output layer and a fixed 3-row input.
fn network_and_input() -> (AptNetwork, Matrix) {
    let mut net = AptNetwork::init(NetworkConfig::new(8, 4, 2), 0.0, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
    let last = net.layers.last_mut().unwrap();
    last.gamma.iter_mut().enumerate().for_each(|(k, g)| *g = 0.5 + 0.125 * k as f64);
    last.beta.iter_mut().enumerate().for_each(|(k, b)| *b = 0.0625 * k as f64 - 0.25);
    let x = Matrix::from_vec(3, 8, (0..24).map(|k| ((k * 7 % 11) as f64 - 5.0) / 4.0).collect()).unwrap();
    (net, x)
}

#[test]
fn forward_output_is_byte_stable() {
    let (mut net, x) = network_and_input();
    net.set_mode(Mode::Train);
    let out = net.forward(&x).unwrap();
    let bits: Vec<u64> = out.as_slice().iter().map(|v| v.to_bits()).collect();
    assert_eq!((out.rows(), out.cols()), (3, 8));
    assert_eq!(bits, GOLDEN);
}

#[test]
fn repeated_forward_passes_agree_bitwise() {
    let (net, x) = network_and_input();
    let a = net.forward(&x).unwrap();
    let b = net.clone().forward(&x).unwrap();
    assert!(a.as_slice().iter().zip(b.as_slice()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn wide_input_keeps_its_shape() {
    let net = AptNetwork::init(NetworkConfig::new(1024, 16, 2), 0.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let x = Matrix::from_vec(2, 1024, (0..2048).map(|k| (k % 13) as f64 / 13.0).collect()).unwrap();
    let out = net.forward(&x).unwrap();
    assert_eq!((out.rows(), out.cols()), (2, 1024));
    // a fresh network emits exactly zero
    assert!(out.as_slice().iter().all(|v| *v == 0.0));
}
