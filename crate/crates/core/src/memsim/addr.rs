use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LINE_BYTES: u64 = 64;

/// Field order of a physical address, most significant first, above the
/// 64-byte line offset.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum AddressMapping {
    /// Row:Bank:Rank:Column:Channel. Consecutive lines alternate channels.
    #[default]
    RoBaRaCoCh,
    /// Row:Bank:Rank:Channel:Column. A whole row's lines stay in one channel.
    RoBaRaChCo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Decoded {
    pub channel: u32,
    pub rank: u32,
    pub bank: u32,
    pub row: u32,
    pub column: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AddressMapper {
    pub mapping: AddressMapping,
    pub channels: u32,
    pub ranks: u32,
    pub banks: u32,
    pub rows: u32,
    pub columns: u32,
}

impl AddressMapper {
    pub fn capacity_bytes(&self) -> u64 {
        [self.channels, self.ranks, self.banks, self.rows, self.columns].iter().map(|&x| x as u64).product::<u64>()
            * LINE_BYTES
    }

    pub fn decode(&self, addr: u64) -> Result<Decoded> {
        if addr >= self.capacity_bytes() {
            return Err(Error::AddressDecode(addr));
        }
        let mut line = addr / LINE_BYTES;
        let mut take = |n: u32| {
            let v = (line % n as u64) as u32;
            line /= n as u64;
            v
        };
        let (channel, column) = match self.mapping {
            AddressMapping::RoBaRaCoCh => {
                let ch = take(self.channels);
                (ch, take(self.columns))
            }
            AddressMapping::RoBaRaChCo => {
                let co = take(self.columns);
                (take(self.channels), co)
            }
        };
        let rank = take(self.ranks);
        let bank = take(self.banks);
        let row = take(self.rows);
        Ok(Decoded { channel, rank, bank, row, column })
    }

    pub fn encode(&self, d: &Decoded) -> u64 {
        let mut line = d.row as u64;
        line = line * self.banks as u64 + d.bank as u64;
        line = line * self.ranks as u64 + d.rank as u64;
        line = match self.mapping {
            AddressMapping::RoBaRaCoCh => {
                (line * self.columns as u64 + d.column as u64) * self.channels as u64 + d.channel as u64
            }
            AddressMapping::RoBaRaChCo => {
                (line * self.channels as u64 + d.channel as u64) * self.columns as u64 + d.column as u64
            }
        };
        line * LINE_BYTES
    }
}
