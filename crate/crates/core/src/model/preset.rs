//! Built-in node sets (per-country OH and EH counts of the 40-OH / 1000-EH
//! reference deployment) and region-to-region link profiles.

use super::{DurationMs, LinkModel, LoadClass};

/// OH nodes per country for the 40-node deployment.
pub const TABLE1_OH_COUNTS: [(&str, u32); 14] = [
    ("Austria", 1),
    ("Canada", 2),
    ("France", 4),
    ("Germany", 9),
    ("Greece", 1),
    ("Hungary", 1),
    ("Israel", 1),
    ("Italy", 6),
    ("Korea", 2),
    ("Poland", 3),
    ("Romania", 2),
    ("Spain", 2),
    ("Switzerland", 1),
    ("US", 5),
];

/// EH nodes per country for the 1000-node deployment. The published listing
/// adds up to 1010; France is trimmed from 110 to 100 so the preset totals
/// exactly 1000.
pub const TABLE2_EH_COUNTS: [(&str, u32); 23] = [
    ("Argentina", 10),
    ("Australia", 10),
    ("Austria", 40),
    ("Belgium", 20),
    ("Canada", 100),
    ("China", 20),
    ("Finland", 10),
    ("France", 100),
    ("Germany", 160),
    ("Greece", 10),
    ("Hungary", 20),
    ("Italy", 60),
    ("Japan", 10),
    ("Korea", 20),
    ("Netherlands", 20),
    ("Poland", 40),
    ("Portugal", 10),
    ("Romania", 20),
    ("Russia", 20),
    ("Spain", 40),
    ("Switzerland", 10),
    ("Taiwan", 10),
    ("US", 240),
];

/// Load factor of the heavily loaded OHs ("CPU over 80%").
const HEAVY_LOAD: f64 = 0.8;
/// Zero-based index of the loaded node among the German OHs.
const LOADED_GERMAN_OH: u32 = 3;

/// Largest-remainder apportionment of `seats` over a count table. Ties in the
/// remainder go to the earlier table row. Countries with zero seats are
/// omitted.
pub fn apportion(table: &[(&'static str, u32)], seats: u32) -> Vec<(&'static str, u32)> {
    let total: u64 = table.iter().map(|&(_, c)| u64::from(c)).sum();
    assert!(total > 0, "empty table");
    let seats64 = u64::from(seats);
    let mut alloc: Vec<(usize, u64, u64)> = table
        .iter()
        .enumerate()
        .map(|(i, &(_, c))| {
            let q = u64::from(c) * seats64;
            (i, q / total, q % total)
        })
        .collect();
    let assigned: u64 = alloc.iter().map(|a| a.1).sum();
    let mut order: Vec<usize> = (0..alloc.len()).collect();
    order.sort_by(|&a, &b| alloc[b].2.cmp(&alloc[a].2).then(a.cmp(&b)));
    for &i in order.iter().take((seats64 - assigned) as usize) {
        alloc[i].1 += 1;
    }
    alloc
        .into_iter()
        .filter(|a| a.1 > 0)
        .map(|(i, n, _)| (table[i].0, n as u32))
        .collect()
}

/// OH node list (region, load) for an `n`-node deployment, `1 <= n <= 40`.
pub fn oh_preset(n: u32) -> Option<Vec<(String, LoadClass)>> {
    if n == 0 || n > 40 {
        return None;
    }
    let mut nodes = Vec::with_capacity(n as usize);
    for (country, count) in apportion(&TABLE1_OH_COUNTS, n) {
        for k in 0..count {
            let loaded = matches!(country, "Korea" | "Israel")
                || (country == "Germany" && k == LOADED_GERMAN_OH);
            let load = if loaded {
                LoadClass::from_factor(HEAVY_LOAD)
            } else {
                LoadClass::IDLE
            };
            nodes.push((country.to_string(), load));
        }
    }
    Some(nodes)
}

/// EH node list for an `n`-node deployment, `1 <= n <= 1000`.
pub fn eh_preset(n: u32) -> Option<Vec<(String, LoadClass)>> {
    if n == 0 || n > 1000 {
        return None;
    }
    Some(
        apportion(&TABLE2_EH_COUNTS, n)
            .into_iter()
            .flat_map(|(c, k)| (0..k).map(move |_| (c.to_string(), LoadClass::IDLE)))
            .collect(),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Continent {
    Europe,
    NorthAmerica,
    SouthAmerica,
    Asia,
    Oceania,
}

pub fn region_continent(region: &str) -> Option<Continent> {
    use Continent::*;
    Some(match region {
        "Austria" | "Belgium" | "Finland" | "France" | "Germany" | "Greece" | "Hungary"
        | "Italy" | "Netherlands" | "Poland" | "Portugal" | "Romania" | "Russia" | "Spain"
        | "Switzerland" => Europe,
        "Canada" | "US" => NorthAmerica,
        "Argentina" => SouthAmerica,
        "China" | "Japan" | "Korea" | "Taiwan" | "Israel" => Asia,
        "Australia" => Oceania,
        _ => return None,
    })
}

/// One-way latency between continents in ms. The smallest value keeps every
/// RTT above 68 ms; the largest, on a loaded receiver, stays under 1 s.
fn continent_latency(a: Continent, b: Continent) -> f64 {
    use Continent::*;
    let (a, b) = if a <= b { (a, b) } else { (b, a) };
    match (a, b) {
        (Europe, Europe) => 40.0,
        (Europe, NorthAmerica) => 55.0,
        (Europe, SouthAmerica) => 110.0,
        (Europe, Asia) => 140.0,
        (Europe, Oceania) => 160.0,
        (NorthAmerica, NorthAmerica) => 40.0,
        (NorthAmerica, SouthAmerica) => 80.0,
        (NorthAmerica, Asia) => 90.0,
        (NorthAmerica, Oceania) => 95.0,
        (SouthAmerica, SouthAmerica) => 40.0,
        (SouthAmerica, Asia) => 170.0,
        (SouthAmerica, Oceania) => 150.0,
        (Asia, Asia) => 50.0,
        (Asia, Oceania) => 70.0,
        (Oceania, Oceania) => 40.0,
        _ => unreachable!("pair is normalised"),
    }
}

const SAME_REGION_LATENCY_MS: f64 = 40.0;
/// Regions whose inbound connects sit on the slow tail in the heavy-tail
/// profile.
const SLOW_REGIONS: [&str; 1] = ["Korea"];
const SLOW_CONNECT_MS: f64 = 25_000.0;

/// Named link matrix generators.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LinkProfile {
    /// Geography-derived latencies, sub-second connects, no loss.
    Fast,
    /// `Fast` plus a heavy connect tail (>= 30 s) on every link into the slow
    /// regions.
    HeavyTail,
}

impl LinkProfile {
    pub fn name(self) -> &'static str {
        match self {
            LinkProfile::Fast => "fast-links",
            LinkProfile::HeavyTail => "heavy-tail",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "fast-links" => Some(LinkProfile::Fast),
            "heavy-tail" => Some(LinkProfile::HeavyTail),
            _ => None,
        }
    }
}

/// Link model for a directed region pair, or `None` for unknown regions.
pub fn link_profile(profile: LinkProfile, from: &str, to: &str) -> Option<LinkModel> {
    let base = if from == to {
        SAME_REGION_LATENCY_MS
    } else {
        continent_latency(region_continent(from)?, region_continent(to)?)
    };
    region_continent(to)?;
    let mut link = LinkModel {
        base_latency_ms: DurationMs::new(base),
        jitter_ms: DurationMs::new(base * 0.1),
        connect_fast_ms: DurationMs::new(3.0 * base + 20.0),
        slow_connect_probability: 0.0,
        slow_connect_ms: DurationMs::ZERO,
        syn_loss_probability: 0.0,
        drop_probability: 0.0,
    };
    if profile == LinkProfile::HeavyTail && SLOW_REGIONS.contains(&to) {
        link.slow_connect_probability = 1.0;
        link.slow_connect_ms = DurationMs::new(SLOW_CONNECT_MS);
    }
    Some(link)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count(nodes: &[(String, LoadClass)], region: &str) -> usize {
        nodes.iter().filter(|(r, _)| r == region).count()
    }

    #[test]
    fn full_oh_preset_matches_table() {
        let nodes = oh_preset(40).unwrap();
        assert_eq!(nodes.len(), 40);
        assert_eq!(count(&nodes, "Germany"), 9);
        assert_eq!(count(&nodes, "US"), 5);
        let countries: std::collections::BTreeSet<_> = nodes.iter().map(|n| &n.0).collect();
        assert_eq!(countries.len(), 14);
    }

    #[test]
    fn full_eh_preset_matches_table() {
        let nodes = eh_preset(1000).unwrap();
        assert_eq!(nodes.len(), 1000);
        assert_eq!(count(&nodes, "US"), 240);
        assert_eq!(count(&nodes, "Germany"), 160);
        let countries: std::collections::BTreeSet<_> = nodes.iter().map(|n| &n.0).collect();
        assert_eq!(countries.len(), 23);
    }

    #[test]
    fn intermediate_presets_sum_to_request() {
        for n in [3, 10, 20, 30, 40] {
            assert_eq!(oh_preset(n).unwrap().len(), n as usize);
        }
        for n in [10, 50, 100, 200, 500, 1000] {
            assert_eq!(eh_preset(n).unwrap().len(), n as usize);
        }
        assert!(oh_preset(0).is_none());
        assert!(oh_preset(41).is_none());
        assert!(eh_preset(1001).is_none());
    }

    #[test]
    fn ten_oh_set_holds_one_loaded_asian_node() {
        let nodes = oh_preset(10).unwrap();
        assert_eq!(count(&nodes, "Korea"), 1);
        assert_eq!(count(&nodes, "US"), 1);
        let loaded = nodes.iter().filter(|n| n.1.load_factor > 0.0).count();
        assert_eq!(loaded, 1);
        // The smallest set is unloaded.
        assert!(oh_preset(3).unwrap().iter().all(|n| n.1.load_factor == 0.0));
    }

    #[test]
    fn apportion_is_exact_at_full_size() {
        let full = apportion(&TABLE1_OH_COUNTS, 40);
        assert_eq!(full, TABLE1_OH_COUNTS.to_vec());
    }

    #[test]
    fn heavy_tail_only_slows_inbound_slow_regions() {
        let into = link_profile(LinkProfile::HeavyTail, "Germany", "Korea").unwrap();
        assert_eq!(into.slow_connect_probability, 1.0);
        let out = link_profile(LinkProfile::HeavyTail, "Korea", "Germany").unwrap();
        assert_eq!(out.slow_connect_probability, 0.0);
        let fast = link_profile(LinkProfile::Fast, "Germany", "Korea").unwrap();
        assert_eq!(fast.slow_connect_probability, 0.0);
        assert!(link_profile(LinkProfile::Fast, "Atlantis", "US").is_none());
    }
}
