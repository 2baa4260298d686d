//! Bundled data: the 35-prompt neutral evaluation set and, for the GPT-2
//! medium checkpoint, a curated map from attribute keywords to the value
//! vectors observed to promote them. The keyword map doubles as a compact
//! demo lexicon set.

/// Neutral sentence openers used by the standard evaluation protocol:
/// 15 subject-style prefixes plus 20 essay-style prefixes.
pub const NEUTRAL_PROMPTS: [&str; 35] = [
    "Once upon a time",
    "The book",
    "The chicken",
    "The city",
    "The country",
    "The horse",
    "The lake",
    "The last time",
    "The movie",
    "The painting",
    "The pizza",
    "The potato",
    "The president of the country",
    "The road",
    "The year is 1910.",
    "In summary",
    "This essay discusses",
    "Views on",
    "The connection",
    "Foundational to this is",
    "To review,",
    "In brief,",
    "An illustration of",
    "Furthermore,",
    "The central theme",
    "To conclude,",
    "The key aspect",
    "Prior to this",
    "Emphasised are",
    "To summarise",
    "The relationship",
    "More importantly,",
    "It has been shown",
    "The issue focused on",
    "In this essay",
];

/// A keyword and the (layer, row) of a value vector known to promote it in
/// the GPT-2 medium checkpoint at high steering weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KnownPosition {
    pub attribute: &'static str,
    pub keyword: &'static str,
    pub layer: usize,
    pub row: usize,
}

const fn kp(attribute: &'static str, keyword: &'static str, layer: usize, row: usize) -> KnownPosition {
    KnownPosition {
        attribute,
        keyword,
        layer,
        row,
    }
}

/// Keyword-to-vector fixtures for GPT-2 medium: thirteen attributes with five
/// keywords each.
pub const KNOWN_POSITIONS: [KnownPosition; 65] = [
    kp("politics", "politics", 20, 1651),
    kp("politics", "government", 22, 3127),
    kp("politics", "election", 17, 1620),
    kp("politics", "republic", 0, 2991),
    kp("politics", "state", 19, 84),
    kp("sports", "sports", 14, 1078),
    kp("sports", "champion", 21, 4020),
    kp("sports", "football", 17, 573),
    kp("sports", "game", 23, 1928),
    kp("sports", "coach", 17, 1773),
    kp("business", "business", 21, 1631),
    kp("business", "commerce", 16, 2225),
    kp("business", "trade", 17, 3938),
    kp("business", "market", 22, 876),
    kp("business", "finance", 22, 2709),
    kp("technology", "technology", 0, 3260),
    kp("technology", "engineering", 0, 3780),
    kp("technology", "science", 13, 3160),
    kp("technology", "internet", 15, 547),
    kp("technology", "robotics", 0, 3260),
    kp("positive", "admire", 10, 459),
    kp("positive", "great", 23, 318),
    kp("positive", "wonderful", 12, 3475),
    kp("positive", "good", 20, 841),
    kp("positive", "happy", 20, 2959),
    kp("negative", "worse", 17, 3792),
    kp("negative", "bad", 19, 3834),
    kp("negative", "abuse", 23, 2534),
    kp("negative", "corrupt", 0, 2890),
    kp("negative", "fake", 21, 1027),
    kp("food", "food", 21, 3922),
    kp("food", "rice", 14, 423),
    kp("food", "meat", 15, 3011),
    kp("food", "milk", 19, 2113),
    kp("food", "salt", 13, 1992),
    kp("american", "America", 19, 684),
    kp("american", "us", 12, 3116),
    kp("american", "Trump", 16, 558),
    kp("american", "bush", 22, 819),
    kp("american", "American", 23, 1417),
    kp("asian", "Asia", 2, 1409),
    kp("asian", "Japan", 18, 1794),
    kp("asian", "Korea", 7, 2880),
    kp("asian", "Singapore", 18, 1794),
    kp("asian", "China", 19, 3818),
    kp("computer", "laptop", 19, 741),
    kp("computer", "hardware", 16, 1933),
    kp("computer", "cpu", 4, 283),
    kp("computer", "processor", 18, 3717),
    kp("computer", "disk", 18, 2619),
    kp("military", "military", 14, 2816),
    kp("military", "war", 6, 989),
    kp("military", "army", 23, 3142),
    kp("military", "navy", 23, 1396),
    kp("military", "soldier", 11, 469),
    kp("legal", "legal", 18, 1137),
    kp("legal", "court", 19, 999),
    kp("legal", "justice", 18, 4022),
    kp("legal", "legislation", 15, 596),
    kp("legal", "rule", 21, 634),
    kp("religion", "religion", 18, 3564),
    kp("religion", "faith", 21, 3294),
    kp("religion", "god", 8, 1710),
    kp("religion", "bless", 20, 691),
    kp("religion", "church", 14, 3094),
];

/// The four topic attributes of the standard topic-control task.
pub const TOPIC_ATTRIBUTES: [&str; 4] = ["politics", "sports", "business", "technology"];

/// Demo lexicons assembled from the keyword fixtures, grouped by attribute.
pub fn demo_lexicons() -> Vec<(String, Vec<String>)> {
    let mut out: Vec<(String, Vec<String>)> = Vec::new();
    for kp in KNOWN_POSITIONS {
        match out.iter_mut().find(|(name, _)| name == kp.attribute) {
            Some((_, kws)) => kws.push(kp.keyword.to_string()),
            None => out.push((kp.attribute.to_string(), vec![kp.keyword.to_string()])),
        }
    }
    out
}
