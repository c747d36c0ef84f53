//! Counter-keyed seed derivation so every random stream in a run is
//! reproducible from the master seed alone.

/// Independent random streams used by one optimization step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedRole {
    Acquire,
    Ehvi,
    Candidates,
    InitialDesign,
    GpFit,
    Grid,
}

impl SeedRole {
    fn tag(self) -> u64 {
        match self {
            SeedRole::Acquire => 0x6163_7175,
            SeedRole::Ehvi => 0x6568_7669,
            SeedRole::Candidates => 0x6361_6e64,
            SeedRole::InitialDesign => 0x696e_6974,
            SeedRole::GpFit => 0x6770_6669,
            SeedRole::Grid => 0x6772_6964,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, index: u64, role: SeedRole) -> u64 {
    let h = splitmix64(master);
    let h = splitmix64(h ^ index);
    splitmix64(h ^ role.tag())
}
