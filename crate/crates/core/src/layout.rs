//! Page packing and pairing rules for unrolled checksum kernels.
//!
//! A dual-page kernel fills each page with identical checksum units after a
//! prologue-sized lead-in, keeping room for an unconditional jump that sits
//! directly after the page's last unit and carries execution to the next
//! page (or to the epilogue after the last page). Keeping every page's unit
//! grid at the same intra-page offsets is what lets a unit patch the
//! corresponding unit in the alternate page with a displacement of exactly
//! one page.

use thiserror::Error;

/// Length of the unconditional jump reserved at the tail of each unit page.
pub const PAGE_TAIL_JUMP_LEN: usize = 5;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LayoutError {
    #[error("unit length {unit_len} exceeds the page size {page_size}")]
    UnitTooLarge { unit_len: usize, page_size: usize },
    #[error("unit length must be nonzero")]
    ZeroUnitLen,
    #[error("page needs at least one unit after {prologue_len} prologue and {PAGE_TAIL_JUMP_LEN} tail bytes")]
    NoUnitFits { prologue_len: usize },
    #[error("page count must be at least 1, got {0}")]
    NoPages(usize),
}

/// Geometry of an emitted unrolled kernel.
///
/// Offsets are relative to the start of the kernel buffer. `site_offsets`
/// locates the mutable opcode byte of every unit in global unit order
/// (page-major). A `page_count` of 1 describes a contiguous block whose
/// units patch their successor with wrap-around instead of an alternate
/// page.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelLayout {
    pub page_size: usize,
    pub page_count: usize,
    pub prologue_len: usize,
    pub unit_len: usize,
    pub units_per_page: usize,
    pub epilogue_offset: usize,
    pub site_offsets: Vec<usize>,
}

impl KernelLayout {
    pub fn total_units(&self) -> usize {
        self.units_per_page * self.page_count
    }

    /// Buffer offset of a unit by global (page-major) index.
    pub fn unit_offset(&self, unit: usize) -> usize {
        let page = unit / self.units_per_page;
        let slot = unit % self.units_per_page;
        page * self.page_size + self.prologue_len + slot * self.unit_len
    }

    /// The page a unit's self-patch writes into.
    pub fn alternate_page(&self, page: usize) -> usize {
        if self.page_count == 1 {
            return 0;
        }
        let flipped = page ^ 1;
        if flipped < self.page_count {
            flipped
        } else {
            page - 1
        }
    }

    /// Global index of the unit whose opcode field a unit toggles.
    ///
    /// Multi-page layouts pair the same slot across adjacent pages; a
    /// single-page block pairs each unit with its successor, wrapping the
    /// last unit back to the first.
    pub fn partner(&self, unit: usize) -> usize {
        let total = self.total_units();
        debug_assert!(unit < total);
        if self.page_count == 1 {
            return (unit + 1) % total;
        }
        let page = unit / self.units_per_page;
        let slot = unit % self.units_per_page;
        self.alternate_page(page) * self.units_per_page + slot
    }

    /// Byte offset of the page-tail jump: directly after the page's last
    /// unit, so execution never falls through padding.
    pub fn page_tail_offset(&self, page: usize) -> usize {
        page * self.page_size + self.prologue_len + self.units_per_page * self.unit_len
    }

    /// Layout for a contiguous unit block with no page mirroring.
    pub fn contiguous_block(
        units: usize,
        unit_len: usize,
        prologue_len: usize,
        epilogue_offset: usize,
    ) -> KernelLayout {
        let site_offsets = (0..units)
            .map(|u| prologue_len + u * unit_len + 1)
            .collect();
        KernelLayout {
            page_size: epilogue_offset,
            page_count: 1,
            prologue_len,
            unit_len,
            units_per_page: units,
            epilogue_offset,
            site_offsets,
        }
    }

    fn check_invariants(&self) {
        assert!(self.prologue_len + self.units_per_page * self.unit_len <= self.page_size);
        if self.page_count >= 2 {
            for (unit, &site) in self.site_offsets.iter().enumerate() {
                let partner = self.partner(unit);
                let partner_site = self.site_offsets[partner];
                let delta = partner_site as i64 - site as i64;
                assert_eq!(
                    delta.unsigned_abs() as usize,
                    self.page_size,
                    "unit {unit} must patch the same intra-page offset one page away"
                );
                // A unit never patches its own page.
                assert_ne!(site / self.page_size, partner_site / self.page_size);
            }
        }
    }
}

/// Pack units into pages.
///
/// Each page holds `prologue_len` lead-in bytes (live prologue on page 0,
/// dead padding on the rest, keeping the unit grids aligned), as many units
/// as fit, and the reserved tail jump. The epilogue starts at the first
/// byte after the last page.
pub fn plan_layout(
    page_size: usize,
    unit_len: usize,
    prologue_len: usize,
    page_count: usize,
) -> Result<KernelLayout, LayoutError> {
    if unit_len == 0 {
        return Err(LayoutError::ZeroUnitLen);
    }
    if page_count == 0 {
        return Err(LayoutError::NoPages(page_count));
    }
    if unit_len > page_size {
        return Err(LayoutError::UnitTooLarge {
            unit_len,
            page_size,
        });
    }
    let reserved = prologue_len + PAGE_TAIL_JUMP_LEN;
    if reserved >= page_size || (page_size - reserved) / unit_len == 0 {
        return Err(LayoutError::NoUnitFits { prologue_len });
    }
    let units_per_page = (page_size - reserved) / unit_len;

    let mut site_offsets = Vec::with_capacity(units_per_page * page_count);
    for page in 0..page_count {
        for slot in 0..units_per_page {
            // The mutable opcode byte sits one byte into the unit, after
            // the REX prefix.
            site_offsets.push(page * page_size + prologue_len + slot * unit_len + 1);
        }
    }

    let layout = KernelLayout {
        page_size,
        page_count,
        prologue_len,
        unit_len,
        units_per_page,
        epilogue_offset: page_count * page_size,
        site_offsets,
    };
    layout.check_invariants();
    Ok(layout)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_geometry_packs_148_units() {
        let layout = plan_layout(4096, 0x1B, 0x5F, 2).unwrap();
        assert_eq!(layout.units_per_page, 148);
        assert_eq!(layout.total_units(), 296);
        assert_eq!(layout.epilogue_offset, 8192);
        assert_eq!(layout.site_offsets[0], 0x5F + 1);
        assert_eq!(layout.site_offsets[148], 4096 + 0x5F + 1);
    }

    #[test]
    fn three_and_four_pages_are_valid() {
        for pages in [3, 4] {
            let layout = plan_layout(4096, 0x1B, 0x5F, pages).unwrap();
            assert_eq!(layout.units_per_page, 148);
            assert_eq!(layout.epilogue_offset, pages * 4096);
            layout.check_invariants();
        }
    }

    #[test]
    fn unit_as_large_as_page_cannot_fit() {
        assert!(matches!(
            plan_layout(4096, 4096, 0, 2),
            Err(LayoutError::NoUnitFits { .. })
        ));
        assert!(matches!(
            plan_layout(4096, 5000, 0, 2),
            Err(LayoutError::UnitTooLarge { .. })
        ));
        assert!(matches!(plan_layout(4096, 0, 0, 2), Err(LayoutError::ZeroUnitLen)));
    }

    #[test]
    fn pairing_crosses_pages_both_ways() {
        let layout = plan_layout(4096, 27, 95, 2).unwrap();
        let upp = layout.units_per_page;
        assert_eq!(layout.partner(0), upp);
        assert_eq!(layout.partner(upp), 0);
        assert_eq!(layout.partner(3), upp + 3);
        assert_eq!(layout.partner(upp + 7), 7);
    }

    #[test]
    fn odd_page_counts_keep_adjacent_pairing() {
        let layout = plan_layout(4096, 27, 95, 3).unwrap();
        let upp = layout.units_per_page;
        assert_eq!(layout.alternate_page(0), 1);
        assert_eq!(layout.alternate_page(1), 0);
        // The trailing odd page writes backward into its neighbour.
        assert_eq!(layout.alternate_page(2), 1);
        assert_eq!(layout.partner(2 * upp + 5), upp + 5);
    }

    #[test]
    fn block_pairing_wraps() {
        let block = KernelLayout::contiguous_block(4, 27, 10, 200);
        assert_eq!(block.partner(0), 1);
        assert_eq!(block.partner(3), 0);
        assert_eq!(block.site_offsets, vec![11, 38, 65, 92]);
    }

    #[test]
    fn unit_offsets_follow_the_grid() {
        let layout = plan_layout(4096, 0x1B, 0x5F, 2).unwrap();
        assert_eq!(layout.unit_offset(0), 0x5F);
        assert_eq!(layout.unit_offset(1), 0x5F + 0x1B);
        assert_eq!(layout.unit_offset(148), 4096 + 0x5F);
        assert_eq!(layout.page_tail_offset(0), 4096 - 5);
    }
}
