//! Offline archive ingestion: JSON-lines user records → per-channel token bags.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{ChannelBags, ChannelSchema, Feature, Source};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TweetKind {
    Original,
    Retweet,
    Reply,
    Quote,
}

impl TweetKind {
    /// Quotes are folded into the retweet source.
    pub fn source(self) -> Source {
        match self {
            TweetKind::Original => Source::Tweet,
            TweetKind::Reply => Source::Reply,
            TweetKind::Retweet | TweetKind::Quote => Source::Retweet,
        }
    }
}

/// The retweeted, quoted or replied-to user and tweet.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Counterpart {
    pub user_id: String,
    #[serde(default)]
    pub bio: String,
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub urls: Vec<String>,
    #[serde(default)]
    pub mentions: Vec<String>,
    #[serde(default)]
    pub hashtags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawTweet {
    pub text: String,
    pub created_at: DateTime<Utc>,
    pub kind: TweetKind,
    #[serde(default)]
    pub urls: Vec<String>,
    #[serde(default)]
    pub mentions: Vec<String>,
    #[serde(default)]
    pub hashtags: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counterpart: Option<Counterpart>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawUserRecord {
    pub user_id: String,
    #[serde(default)]
    pub bio: String,
    #[serde(default)]
    pub follower_ids: Vec<String>,
    #[serde(default)]
    pub friend_ids: Vec<String>,
    #[serde(default)]
    pub tweets: Vec<RawTweet>,
    /// Present on labelled exports (e.g. silver datasets).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attrs: BTreeMap<String, String>,
}

impl RawUserRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.user_id.is_empty() {
            return Err("empty user_id".into());
        }
        for (i, t) in self.tweets.iter().enumerate() {
            if t.kind != TweetKind::Original && t.counterpart.is_none() {
                return Err(format!("tweet {i} of kind {:?} has no counterpart", t.kind));
            }
        }
        Ok(())
    }
}

/// Half-open time window `[after, before)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TimeWindow {
    after: Option<DateTime<Utc>>,
    before: Option<DateTime<Utc>>,
}

impl TimeWindow {
    pub fn unbounded() -> Self {
        TimeWindow::default()
    }

    pub fn new(after: Option<DateTime<Utc>>, before: Option<DateTime<Utc>>) -> Result<Self> {
        if let (Some(a), Some(b)) = (after, before) {
            if a >= b {
                return Err(Error::Validation(format!(
                    "empty time window: after {a} is not earlier than before {b}"
                )));
            }
        }
        Ok(TimeWindow { after, before })
    }

    pub fn contains(&self, t: &DateTime<Utc>) -> bool {
        self.after.is_none_or(|a| *t >= a) && self.before.is_none_or(|b| *t < b)
    }
}

/// Parse a timestamp given as RFC 3339, a bare date, or a bare year.
pub fn parse_timestamp(s: &str) -> Result<DateTime<Utc>> {
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Ok(t.with_timezone(&Utc));
    }
    let date = if let Ok(d) = chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        d
    } else if let Some(d) = s
        .parse::<i32>()
        .ok()
        .and_then(|y| chrono::NaiveDate::from_ymd_opt(y, 1, 1))
    {
        d
    } else {
        return Err(Error::Validation(format!("unparseable timestamp {s:?}")));
    };
    Ok(date.and_hms_opt(0, 0, 0).expect("midnight").and_utc())
}

/// Counts from one pass over an archive.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ArchiveSummary {
    pub records: usize,
    pub errors: Vec<(usize, String)>,
}

/// Streaming reader over a JSON-lines archive. Malformed lines are yielded as
/// [`Error::Parse`] with their line number and also tallied in the summary.
pub struct ArchiveReader<R> {
    lines: std::io::Lines<R>,
    line: usize,
    summary: ArchiveSummary,
}

impl<R: BufRead> ArchiveReader<R> {
    pub fn new(reader: R) -> Self {
        ArchiveReader {
            lines: reader.lines(),
            line: 0,
            summary: ArchiveSummary::default(),
        }
    }

    pub fn summary(&self) -> &ArchiveSummary {
        &self.summary
    }
}

impl<R: BufRead> Iterator for ArchiveReader<R> {
    type Item = Result<RawUserRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = self.lines.next()?;
            self.line += 1;
            let line = match line {
                Ok(l) => l,
                Err(e) => {
                    self.summary.errors.push((self.line, e.to_string()));
                    return Some(Err(Error::Parse {
                        line: self.line,
                        message: e.to_string(),
                    }));
                }
            };
            if line.trim().is_empty() {
                continue;
            }
            let parsed = serde_json::from_str::<RawUserRecord>(&line)
                .map_err(|e| e.to_string())
                .and_then(|r| r.validate().map(|_| r));
            return Some(match parsed {
                Ok(r) => {
                    self.summary.records += 1;
                    Ok(r)
                }
                Err(message) => {
                    self.summary.errors.push((self.line, message.clone()));
                    Err(Error::Parse {
                        line: self.line,
                        message,
                    })
                }
            });
        }
    }
}

pub fn parse_archive(path: &Path) -> Result<ArchiveReader<std::io::BufReader<std::fs::File>>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(ArchiveReader::new(std::io::BufReader::new(f)))
}

fn scan_prefixed(text: &str, prefix: char) -> Vec<String> {
    let mut out = Vec::new();
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if c != prefix {
            continue;
        }
        // A prefix glued to a preceding word character is not a tag (e.g. emails).
        if text[..i]
            .chars()
            .next_back()
            .is_some_and(|p| p.is_alphanumeric() || p == '_')
        {
            continue;
        }
        let start = i + c.len_utf8();
        let mut end = start;
        while let Some(&(j, d)) = chars.peek() {
            if d.is_alphanumeric() || d == '_' {
                end = j + d.len_utf8();
                chars.next();
            } else {
                break;
            }
        }
        if end > start {
            out.push(text[start..end].to_string());
        }
    }
    out
}

/// Hashtags in `text`, lowercased and without '#'.
pub fn extract_hashtags(text: &str) -> Vec<String> {
    scan_prefixed(text, '#')
        .into_iter()
        .map(|h| h.to_lowercase())
        .collect()
}

/// Handles mentioned in `text`, case preserved, without '@'.
pub fn extract_mentions(text: &str) -> Vec<String> {
    scan_prefixed(text, '@')
}

pub fn extract_urls(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter(|w| w.starts_with("http://") || w.starts_with("https://"))
        .map(|w| {
            w.trim_end_matches(|c: char| ".,;:!?)]}'\"".contains(c))
                .to_string()
        })
        .collect()
}

/// Registered-domain label and `<subdomain>.<label>` for a URL, using the
/// bundled public-suffix list. Returns `None` for IPs and bare suffixes.
pub fn url_domains(raw: &str) -> Option<(String, String)> {
    let with_scheme = if raw.contains("://") {
        raw.to_string()
    } else {
        format!("http://{raw}")
    };
    let parsed = url::Url::parse(&with_scheme).ok()?;
    let host = match parsed.host()? {
        url::Host::Domain(h) => h.trim_end_matches('.').to_lowercase(),
        _ => return None,
    };
    let registrable = psl::domain_str(&host)?;
    let suffix = psl::suffix_str(registrable)?;
    let label = registrable.strip_suffix(suffix)?.strip_suffix('.')?;
    if label.is_empty() {
        return None;
    }
    let sub = host
        .strip_suffix(registrable)
        .map(|s| s.trim_end_matches('.'))
        .unwrap_or("");
    let codomain = if sub.is_empty() {
        label.to_string()
    } else {
        format!("{sub}.{label}")
    };
    Some((label.to_string(), codomain))
}

fn or_extracted(given: &[String], fallback: impl FnOnce() -> Vec<String>) -> Vec<String> {
    if given.is_empty() {
        fallback()
    } else {
        given.to_vec()
    }
}

fn channel_name(schema: &ChannelSchema, source: Source, feature: Feature) -> Option<&str> {
    schema.find(source, feature).map(|id| schema.channel(id).name.as_str())
}

fn push_all(bags: &mut ChannelBags, schema: &ChannelSchema, source: Source, feature: Feature, toks: Vec<String>) {
    if let Some(name) = channel_name(schema, source, feature) {
        let name = name.to_string();
        for t in toks {
            bags.push_token(&name, t);
        }
    }
}

fn append_doc(bags: &mut ChannelBags, schema: &ChannelSchema, source: Source, feature: Feature, text: &str) {
    if text.is_empty() {
        return;
    }
    if let Some(name) = channel_name(schema, source, feature) {
        let doc = bags.documents.entry(name.to_string()).or_default();
        if !doc.is_empty() {
            doc.push('\n');
        }
        doc.push_str(text);
    }
}

/// Extract per-channel token bags and dense-channel documents from one
/// record, ignoring tweets outside `window`.
///
/// The tweet-source bios document is the user's own bio; reply and retweet
/// bios come from the counterpart users (each counterpart bio once).
pub fn extract_channels(schema: &ChannelSchema, record: &RawUserRecord, window: &TimeWindow) -> ChannelBags {
    let mut bags = ChannelBags::new(record.user_id.clone());
    bags.label = record.label;
    bags.attrs = record.attrs.clone();

    append_doc(&mut bags, schema, Source::Tweet, Feature::Bios, &record.bio);
    push_all(&mut bags, schema, Source::Profile, Feature::FollowerIds, record.follower_ids.clone());
    push_all(&mut bags, schema, Source::Profile, Feature::FriendIds, record.friend_ids.clone());

    let mut seen_bios: BTreeSet<(Source, String)> = BTreeSet::new();
    for tweet in record.tweets.iter().filter(|t| window.contains(&t.created_at)) {
        let source = tweet.kind.source();
        let mut hashtags = or_extracted(&tweet.hashtags, || extract_hashtags(&tweet.text));
        let mut mentions = or_extracted(&tweet.mentions, || extract_mentions(&tweet.text));
        let mut urls = or_extracted(&tweet.urls, || extract_urls(&tweet.text));

        if let Some(cp) = &tweet.counterpart {
            if source == Source::Retweet {
                hashtags.extend(or_extracted(&cp.hashtags, || extract_hashtags(&cp.text)));
                mentions.extend(or_extracted(&cp.mentions, || extract_mentions(&cp.text)));
                urls.extend(or_extracted(&cp.urls, || extract_urls(&cp.text)));
            }
            let id_feature = if source == Source::Reply {
                Feature::ReplieeIds
            } else {
                Feature::RetweeteeIds
            };
            push_all(&mut bags, schema, source, id_feature, vec![cp.user_id.clone()]);
            if seen_bios.insert((source, cp.user_id.clone())) {
                append_doc(&mut bags, schema, source, Feature::Bios, &cp.bio);
            }
        }

        let hashtags = hashtags
            .into_iter()
            .map(|h| h.trim_start_matches('#').to_lowercase())
            .filter(|h| !h.is_empty())
            .collect();
        let mentions = mentions
            .into_iter()
            .map(|m| m.trim_start_matches('@').to_string())
            .filter(|m| !m.is_empty())
            .collect();
        let (domains, codomains): (Vec<_>, Vec<_>) = urls.iter().filter_map(|u| url_domains(u)).unzip();

        push_all(&mut bags, schema, source, Feature::Hashtags, hashtags);
        push_all(&mut bags, schema, source, Feature::Mentions, mentions);
        push_all(&mut bags, schema, source, Feature::Domains, domains);
        push_all(&mut bags, schema, source, Feature::DomainCodomain, codomains);
        append_doc(&mut bags, schema, source, Feature::Text, &tweet.text);
    }
    bags
}

/// Drop the profile-derived channels (own bio, followers, friends), which
/// cannot be reconstructed for past time windows.
pub fn strip_profile(schema: &ChannelSchema, bags: &mut ChannelBags) {
    if let Some(n) = channel_name(schema, Source::Tweet, Feature::Bios) {
        bags.documents.remove(n);
    }
    for f in [Feature::FollowerIds, Feature::FriendIds] {
        if let Some(n) = channel_name(schema, Source::Profile, f) {
            bags.tokens.remove(n);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ts(s: &str) -> DateTime<Utc> {
        parse_timestamp(s).unwrap()
    }

    fn tweet(text: &str, when: &str, kind: TweetKind) -> RawTweet {
        RawTweet {
            text: text.into(),
            created_at: ts(when),
            kind,
            urls: vec![],
            mentions: vec![],
            hashtags: vec![],
            counterpart: None,
        }
    }

    fn record(tweets: Vec<RawTweet>) -> RawUserRecord {
        RawUserRecord {
            user_id: "u1".into(),
            bio: String::new(),
            follower_ids: vec![],
            friend_ids: vec![],
            tweets,
            label: None,
            attrs: BTreeMap::new(),
        }
    }

    #[test]
    fn hashtag_and_domain_example() {
        let s = ChannelSchema::default_schema();
        let r = record(vec![tweet(
            "Go #MAGA https://www.theguardian.com/us",
            "2019-01-01",
            TweetKind::Original,
        )]);
        let b = extract_channels(&s, &r, &TimeWindow::unbounded());
        assert_eq!(b.channel_tokens("tweet_hashtags"), &["maga".to_string()]);
        assert_eq!(b.channel_tokens("tweet_domains"), &["theguardian".to_string()]);
        assert_eq!(b.channel_tokens("tweet_domain_codomain"), &["www.theguardian".to_string()]);
        assert!(b.channel_tokens("retweetee_ids").is_empty());
        assert!(b.channel_tokens("repliee_ids").is_empty());
        assert!(b.document("tweet_text").contains("#MAGA"));
    }

    #[test]
    fn reply_mentions_and_repliee() {
        let s = ChannelSchema::default_schema();
        let mut t = tweet("@JoeBiden thanks", "2019-01-01", TweetKind::Reply);
        t.counterpart = Some(Counterpart {
            user_id: "939091".into(),
            bio: "46th president".into(),
            ..Default::default()
        });
        let b = extract_channels(&s, &record(vec![t]), &TimeWindow::unbounded());
        assert_eq!(b.channel_tokens("reply_mentions"), &["JoeBiden".to_string()]);
        assert_eq!(b.channel_tokens("repliee_ids"), &["939091".to_string()]);
        assert_eq!(b.document("reply_bios"), "46th president");
    }

    #[test]
    fn window_excludes_old_tweets() {
        let s = ChannelSchema::default_schema();
        let r = record(vec![tweet("#old", "2016-05-01", TweetKind::Original)]);
        let w = TimeWindow::new(Some(ts("2018")), None).unwrap();
        let b = extract_channels(&s, &r, &w);
        assert!(b.tokens.values().all(Vec::is_empty));
        assert!(b.documents.is_empty());
        assert!(TimeWindow::new(Some(ts("2018")), Some(ts("2017"))).is_err());
    }

    #[test]
    fn quotes_fold_into_retweets() {
        let s = ChannelSchema::default_schema();
        let mut t = tweet("look", "2019-01-01", TweetKind::Quote);
        t.counterpart = Some(Counterpart {
            user_id: "7".into(),
            text: "#TaxReform is here".into(),
            ..Default::default()
        });
        let b = extract_channels(&s, &record(vec![t]), &TimeWindow::unbounded());
        assert_eq!(b.channel_tokens("retweetee_ids"), &["7".to_string()]);
        assert_eq!(b.channel_tokens("retweet_hashtags"), &["taxreform".to_string()]);
    }

    #[test]
    fn suffix_is_never_a_domain() {
        assert_eq!(url_domains("https://senate.gov/x"), Some(("senate".into(), "senate".into())));
        assert_eq!(
            url_domains("https://news.bbc.co.uk/a"),
            Some(("bbc".into(), "news.bbc".into()))
        );
        assert_eq!(url_domains("https://co.uk/"), None);
        assert_eq!(url_domains("http://127.0.0.1/x"), None);
        assert_eq!(url_domains("not a url"), None);
    }

    #[test]
    fn text_extractors() {
        assert_eq!(extract_hashtags("a #One, #two! mail@x.com #"), vec!["one", "two"]);
        assert_eq!(extract_mentions("hi @Bob and me@example.com"), vec!["Bob"]);
        assert_eq!(extract_urls("see (https://t.co/x)."), Vec::<String>::new());
        assert_eq!(extract_urls("see https://t.co/x."), vec!["https://t.co/x"]);
    }

    #[test]
    fn archive_error_isolation() {
        let good = serde_json::to_string(&record(vec![])).unwrap();
        let text = format!("{good}\n{{not json\n\n{good}\n");
        let mut reader = ArchiveReader::new(text.as_bytes());
        let items: Vec<_> = reader.by_ref().collect();
        assert_eq!(items.len(), 3);
        assert!(matches!(items[1], Err(Error::Parse { line: 2, .. })));
        assert_eq!(reader.summary().records, 2);
        assert_eq!(reader.summary().errors.len(), 1);
        assert_eq!(ArchiveReader::new(&b""[..]).count(), 0);
    }

    #[test]
    fn counterpart_required_for_non_original() {
        let r = record(vec![tweet("x", "2019-01-01", TweetKind::Retweet)]);
        assert!(r.validate().is_err());
    }
}
