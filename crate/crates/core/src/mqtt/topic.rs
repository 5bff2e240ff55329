//! MQTT 3.1.1 topic names and filters.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("invalid topic filter {0:?}")]
pub struct InvalidFilter(pub String);

/// Topic names are nonempty and carry no wildcards.
pub fn valid_topic_name(name: &str) -> bool {
    !name.is_empty() && name.len() <= 65_535 && !name.contains(['+', '#', '\0'])
}

/// `+` must fill a whole level; `#` must be the whole last level.
pub fn valid_topic_filter(filter: &str) -> bool {
    if filter.is_empty() || filter.len() > 65_535 || filter.contains('\0') {
        return false;
    }
    let levels: Vec<&str> = filter.split('/').collect();
    let last = levels.len() - 1;
    levels.iter().enumerate().all(|(i, level)| match *level {
        "#" => i == last,
        "+" => true,
        l => !l.contains(['+', '#']),
    })
}

/// A validated subscription filter.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TopicFilter(String);

impl TopicFilter {
    pub fn new(filter: impl Into<String>) -> Result<Self, InvalidFilter> {
        let filter = filter.into();
        if valid_topic_filter(&filter) {
            Ok(Self(filter))
        } else {
            Err(InvalidFilter(filter))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn matches(&self, topic: &str) -> bool {
        topic_matches(&self.0, topic)
    }
}

impl FromStr for TopicFilter {
    type Err = InvalidFilter;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TopicFilter::new(s)
    }
}

impl fmt::Display for TopicFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Level-wise match of a topic name against a (valid) filter. `a/#` also
/// matches `a` itself. Topics starting with `$` are not matched by a
/// leading wildcard.
pub fn topic_matches(filter: &str, topic: &str) -> bool {
    if topic.starts_with('$') && (filter.starts_with('+') || filter.starts_with('#')) {
        return false;
    }
    let mut f = filter.split('/');
    let mut t = topic.split('/');
    loop {
        match (f.next(), t.next()) {
            (Some("#"), _) => return true,
            (Some("+"), Some(_)) => {}
            (Some(fl), Some(tl)) if fl == tl => {}
            (None, None) => return true,
            _ => return false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert!(topic_matches("a/b", "a/b"));
        assert!(topic_matches("piico/+/n1/#", "piico/gw1/n1/s3/reading"));
        assert!(!topic_matches("a/#", "b"));
        assert!(topic_matches("a/#", "a"));
        assert!(topic_matches("a/+", "a/"));
        assert!(!topic_matches("a/+", "a"));
        assert!(!topic_matches("a/+", "a/b/c"));
        assert!(topic_matches("+/+", "/x"));
        assert!(!topic_matches("a/b", "a/b/"));
        assert!(topic_matches("cfg/+/n1", "cfg/gw1/n1"));
        assert!(!topic_matches("#", "$SYS/uptime"));
        assert!(topic_matches("$SYS/#", "$SYS/uptime"));
    }

    #[test]
    fn filter_validation() {
        for good in ["#", "+", "a/+/b", "a/#", "/", "+/+", "sport/tennis/+"] {
            assert!(valid_topic_filter(good), "{good}");
        }
        for bad in ["", "a#", "a/#/b", "a+/b", "#/", "a/b#"] {
            assert!(!valid_topic_filter(bad), "{bad}");
        }
        assert!(TopicFilter::new("dat/#").is_ok());
        assert!(!valid_topic_name("a/+"));
        assert!(!valid_topic_name(""));
    }

    fn topic() -> impl Strategy<Value = String> {
        prop::collection::vec("[a-z0-9]{0,4}", 1..6).prop_map(|levels| levels.join("/"))
    }

    proptest! {
        #[test]
        fn hash_matches_everything(t in topic()) {
            prop_assert!(topic_matches("#", &t));
        }

        #[test]
        fn literal_filter_matches_only_itself(f in topic(), t in topic()) {
            prop_assert!(topic_matches(&f, &f));
            prop_assert_eq!(topic_matches(&f, &t), f == t);
        }

        #[test]
        fn plus_matches_same_depth(t in topic()) {
            let depth = t.split('/').count();
            let filter = vec!["+"; depth].join("/");
            prop_assert!(topic_matches(&filter, &t));
            let deeper = format!("{filter}/+");
            prop_assert!(!topic_matches(&deeper, &t));
        }
    }
}
