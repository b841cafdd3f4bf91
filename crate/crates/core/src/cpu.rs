//! Processor identification for reports and event selection.

use crate::exec::page_size;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Vendor {
    Intel,
    Amd,
}

#[derive(Debug, Clone)]
pub struct CpuInfo {
    pub manufacturer: String,
    pub display_family: u32,
    pub display_model: u32,
    pub pmc_version: u32,
    pub pmc_count: u32,
    pub pmc_width: u32,
    pub page_size: usize,
}

#[cfg(target_arch = "x86_64")]
pub fn detect() -> CpuInfo {
    use std::arch::x86_64::__cpuid;
    let leaf0 = __cpuid(0);
    let mut manufacturer = Vec::with_capacity(12);
    manufacturer.extend_from_slice(&leaf0.ebx.to_le_bytes());
    manufacturer.extend_from_slice(&leaf0.edx.to_le_bytes());
    manufacturer.extend_from_slice(&leaf0.ecx.to_le_bytes());
    let manufacturer = String::from_utf8_lossy(&manufacturer).into_owned();

    let leaf1 = __cpuid(1);
    let base_family = (leaf1.eax >> 8) & 0xF;
    let base_model = (leaf1.eax >> 4) & 0xF;
    let ext_family = (leaf1.eax >> 20) & 0xFF;
    let ext_model = (leaf1.eax >> 16) & 0xF;
    let display_family = if base_family == 0xF {
        base_family + ext_family
    } else {
        base_family
    };
    let display_model = if base_family == 0xF || base_family == 0x6 {
        (ext_model << 4) | base_model
    } else {
        base_model
    };

    // Architectural performance monitoring leaf; all-zero on parts (and
    // hypervisors) that hide the PMU.
    let (pmc_version, pmc_count, pmc_width) = if leaf0.eax >= 0xA {
        let leaf_a = __cpuid(0xA);
        (leaf_a.eax & 0xFF, (leaf_a.eax >> 8) & 0xFF, (leaf_a.eax >> 16) & 0xFF)
    } else {
        (0, 0, 0)
    };

    CpuInfo {
        manufacturer,
        display_family,
        display_model,
        pmc_version,
        pmc_count,
        pmc_width,
        page_size: page_size(),
    }
}

#[cfg(not(target_arch = "x86_64"))]
pub fn detect() -> CpuInfo {
    CpuInfo {
        manufacturer: "unknown".into(),
        display_family: 0,
        display_model: 0,
        pmc_version: 0,
        pmc_count: 0,
        pmc_width: 0,
        page_size: page_size(),
    }
}

pub fn vendor() -> Option<Vendor> {
    match detect().manufacturer.as_str() {
        "GenuineIntel" => Some(Vendor::Intel),
        "AuthenticAMD" => Some(Vendor::Amd),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detect_reports_page_size() {
        let info = detect();
        assert_eq!(info.page_size, page_size());
        assert!(!info.manufacturer.is_empty());
    }

    #[cfg(target_arch = "x86_64")]
    #[test]
    fn vendor_is_known_on_x86() {
        // The test matrix only runs on Intel/AMD hosts.
        assert!(vendor().is_some());
    }
}
