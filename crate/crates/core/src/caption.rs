//! Captioning client interface and a deterministic offline mock.
//!
//! A request carries the page image (PNG bytes), the enriched page XML and a
//! prompt; a response carries one caption per panel in reading order plus a
//! page-level story.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::EnrichedPage;

/// Prompt sent with each captioning request. Paraphrased, not a verbatim
/// copy of any reference prompt.
pub const CAPTION_PROMPT_TEMPLATE: &str = "You are given a manga page and an XML description of \
it. Panels in the XML are listed in reading order; each panel lists the characters it contains \
and each character lists the lines it speaks. Write one caption per panel, in the same order, \
describing the scene, the characters and what they say. Then summarize the whole page as a short \
story. Answer as JSON: {\"panel_captions\": [...], \"story\": \"...\"}.";

/// Caption produced by the mock for panels without dialogue.
pub const WORDLESS_CAPTION: &str = "a wordless panel";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionResult {
    pub panel_captions: Vec<String>,
    pub story: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRequest {
    pub image_png: Vec<u8>,
    pub xml: String,
    pub prompt: String,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum CaptionError {
    /// Transport-level failure; the request may be retried.
    #[error("transport failure (retryable): {0}")]
    Transport(String),
    #[error("request timed out after {0} ms")]
    Timeout(u64),
    #[error("retries exhausted after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: usize, last: String },
    #[error("protocol violation: {0}")]
    Protocol(String),
}

impl CaptionError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, CaptionError::Transport(_) | CaptionError::Timeout(_))
    }
}

/// Implementations must be safe for concurrent requests.
pub trait CaptioningClient: Send + Sync {
    fn request(&self, req: &CaptionRequest) -> Result<CaptionResult, CaptionError>;
}

/// Offline client whose captions depend only on the XML's dialogue text.
///
/// Each panel's caption joins its lines as `Name: "line"` (speaker known) or
/// `"line"` (panel-level); panels without lines get [`WORDLESS_CAPTION`]. The
/// story joins the captions with `" / "`.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockCaptioner;

impl CaptioningClient for MockCaptioner {
    fn request(&self, req: &CaptionRequest) -> Result<CaptionResult, CaptionError> {
        let page = EnrichedPage::parse(&req.xml)
            .map_err(|e| CaptionError::Protocol(format!("unreadable XML: {e}")))?;
        let panel_captions: Vec<String> = (0..page.panel_count())
            .map(|i| {
                let lines = page.panel_lines(i);
                if lines.is_empty() {
                    return WORDLESS_CAPTION.to_string();
                }
                lines
                    .iter()
                    .map(|(who, text)| match who {
                        Some(name) => format!("{name}: \"{text}\""),
                        None => format!("\"{text}\""),
                    })
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect();
        let story = panel_captions.join(" / ");
        Ok(CaptionResult {
            panel_captions,
            story,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub max_attempts: usize,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_attempts: 3 }
    }
}

/// Requests captions for an enriched page and checks the response shape.
pub fn request_captions(
    client: &dyn CaptioningClient,
    page_png: Vec<u8>,
    enriched: &EnrichedPage,
    policy: RetryPolicy,
) -> Result<CaptionResult, CaptionError> {
    let req = CaptionRequest {
        image_png: page_png,
        xml: enriched.to_xml(),
        prompt: CAPTION_PROMPT_TEMPLATE.to_string(),
    };
    let attempts = policy.max_attempts.max(1);
    let mut last = None;
    for _ in 0..attempts {
        match client.request(&req) {
            Ok(res) => return validate_response(res, enriched.panel_count()),
            Err(e) if e.is_retryable() => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(CaptionError::RetriesExhausted {
        attempts,
        last: last.map(|e| e.to_string()).unwrap_or_default(),
    })
}

fn validate_response(res: CaptionResult, panels: usize) -> Result<CaptionResult, CaptionError> {
    if res.panel_captions.len() != panels {
        return Err(CaptionError::Protocol(format!(
            "{} captions for {panels} panels",
            res.panel_captions.len()
        )));
    }
    if let Some(i) = res.panel_captions.iter().position(|c| c.trim().is_empty()) {
        return Err(CaptionError::Protocol(format!("caption {i} is empty")));
    }
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::{build_enriched_xml, DialogLink, NamedBox, PageAnnotation, PanelAnnotation, TextBox};
    use crate::bbox::BBox;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn three_panel_page() -> EnrichedPage {
        let mut a = PageAnnotation::new("p", 90, 30);
        for i in 0..3u32 {
            a.panels.push(PanelAnnotation {
                bbox: BBox::new(i * 30, 0, i * 30 + 30, 30),
                order_index: None,
                caption: None,
            });
        }
        a.characters.push(NamedBox {
            name: "Ken".into(),
            bbox: BBox::new(2, 2, 10, 10),
        });
        a.texts.push(TextBox {
            content: "Hello".into(),
            bbox: BBox::new(12, 2, 20, 10),
        });
        a.texts.push(TextBox {
            content: "Bang".into(),
            bbox: BBox::new(62, 2, 70, 10),
        });
        a.dialog_links.push(DialogLink {
            text_index: 0,
            character: "Ken".into(),
        });
        build_enriched_xml(&a, &[0, 1, 2]).unwrap()
    }

    #[test]
    fn mock_echoes_dialogue() {
        let page = three_panel_page();
        let res = request_captions(&MockCaptioner, vec![], &page, RetryPolicy::default()).unwrap();
        assert_eq!(
            res.panel_captions,
            vec!["Ken: \"Hello\"", WORDLESS_CAPTION, "\"Bang\""]
        );
        assert!(res.story.contains("Hello"));
    }

    struct Short;
    impl CaptioningClient for Short {
        fn request(&self, _: &CaptionRequest) -> Result<CaptionResult, CaptionError> {
            Ok(CaptionResult {
                panel_captions: vec!["a".into(), "b".into()],
                story: String::new(),
            })
        }
    }

    #[test]
    fn wrong_caption_count_is_protocol_error() {
        let err = request_captions(&Short, vec![], &three_panel_page(), RetryPolicy::default())
            .unwrap_err();
        assert!(matches!(err, CaptionError::Protocol(_)));
    }

    struct Flaky {
        failures: usize,
        calls: AtomicUsize,
    }
    impl CaptioningClient for Flaky {
        fn request(&self, req: &CaptionRequest) -> Result<CaptionResult, CaptionError> {
            if self.calls.fetch_add(1, Ordering::SeqCst) < self.failures {
                return Err(CaptionError::Transport("reset".into()));
            }
            MockCaptioner.request(req)
        }
    }

    #[test]
    fn transport_errors_are_retried_then_surfaced() {
        let page = three_panel_page();
        let ok = Flaky {
            failures: 2,
            calls: AtomicUsize::new(0),
        };
        assert!(request_captions(&ok, vec![], &page, RetryPolicy { max_attempts: 3 }).is_ok());
        let bad = Flaky {
            failures: 5,
            calls: AtomicUsize::new(0),
        };
        let err = request_captions(&bad, vec![], &page, RetryPolicy { max_attempts: 3 }).unwrap_err();
        assert!(matches!(err, CaptionError::RetriesExhausted { attempts: 3, .. }));
        assert_eq!(bad.calls.load(Ordering::SeqCst), 3);
    }
}
