use serde::{Deserialize, Serialize};

use crate::error::SimError;
use crate::ids::{Rank, RegionId};

/// Which side of the PCIe boundary can poll a region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Space {
    Device,
    Host,
}

/// Address inside a registered region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Addr {
    pub region: RegionId,
    pub offset: u32,
}

impl Addr {
    pub fn new(region: RegionId, offset: u32) -> Self {
        Addr { region, offset }
    }

    pub fn offset_by(self, bytes: u32) -> Addr {
        Addr {
            region: self.region,
            offset: self.offset + bytes,
        }
    }
}

impl std::fmt::Display for Addr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}+{}", self.region, self.offset)
    }
}

#[derive(Debug, Clone)]
pub struct MemoryRegion {
    pub owner: Rank,
    pub space: Space,
    bytes: Vec<u8>,
}

impl MemoryRegion {
    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }
}

/// All registered memory in the simulated system.
#[derive(Debug, Default, Clone)]
pub struct Memory {
    regions: Vec<MemoryRegion>,
}

impl Memory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, owner: Rank, space: Space, len: usize) -> RegionId {
        self.regions.push(MemoryRegion {
            owner,
            space,
            bytes: vec![0; len],
        });
        RegionId(self.regions.len() as u32 - 1)
    }

    pub fn region(&self, id: RegionId) -> &MemoryRegion {
        &self.regions[id.0 as usize]
    }

    pub fn space(&self, addr: Addr) -> Space {
        self.region(addr.region).space
    }

    fn check(&self, addr: Addr, len: usize) -> Result<(), SimError> {
        let size = self
            .regions
            .get(addr.region.0 as usize)
            .map(|r| r.bytes.len())
            .unwrap_or(0);
        let end = addr.offset as u64 + len as u64;
        if end > size as u64 {
            return Err(SimError::OutOfBounds {
                region: addr.region,
                offset: addr.offset as u64,
                len: len as u64,
                size: size as u64,
            });
        }
        Ok(())
    }

    pub fn read(&self, addr: Addr, len: usize) -> Result<&[u8], SimError> {
        self.check(addr, len)?;
        let off = addr.offset as usize;
        Ok(&self.regions[addr.region.0 as usize].bytes[off..off + len])
    }

    pub fn write(&mut self, addr: Addr, data: &[u8]) -> Result<(), SimError> {
        self.check(addr, data.len())?;
        let off = addr.offset as usize;
        self.regions[addr.region.0 as usize].bytes[off..off + data.len()].copy_from_slice(data);
        Ok(())
    }

    pub fn read_u64(&self, addr: Addr) -> Result<u64, SimError> {
        let b = self.read(addr, 8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub fn write_u64(&mut self, addr: Addr, value: u64) -> Result<(), SimError> {
        self.write(addr, &value.to_le_bytes())
    }

    /// Increments a flag word and returns the new value.
    pub fn add_u64(&mut self, addr: Addr, delta: u64) -> Result<u64, SimError> {
        let v = self.read_u64(addr)?.wrapping_add(delta);
        self.write_u64(addr, v)?;
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounds_are_enforced() {
        let mut m = Memory::new();
        let r = m.register(0, Space::Device, 16);
        m.write_u64(Addr::new(r, 8), 7).unwrap();
        assert_eq!(m.read_u64(Addr::new(r, 8)).unwrap(), 7);
        assert!(matches!(
            m.write_u64(Addr::new(r, 9), 1),
            Err(SimError::OutOfBounds { .. })
        ));
        assert!(m.read(Addr::new(r, 16), 0).is_ok());
        assert!(m.read(Addr::new(RegionId(5), 0), 1).is_err());
    }

    #[test]
    fn add_u64_increments() {
        let mut m = Memory::new();
        let r = m.register(1, Space::Host, 8);
        let a = Addr::new(r, 0);
        assert_eq!(m.add_u64(a, 1).unwrap(), 1);
        assert_eq!(m.add_u64(a, 2).unwrap(), 3);
        assert_eq!(m.space(a), Space::Host);
        assert_eq!(m.region(r).owner, 1);
    }
}
