//! Named sub-seed derivation.
//!
//! Every random draw in the pipeline (scenario sampling, split shuffling,
//! network initialization, observation noise) flows from one global seed
//! through a label, so stages can be re-run independently and still
//! reproduce bit for bit.

/// Derives a deterministic sub-seed from a root seed and a role label.
///
/// FNV-1a over the label folded into the root, finished with splitmix64 so
/// nearby roots and labels decorrelate.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(root ^ h)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
