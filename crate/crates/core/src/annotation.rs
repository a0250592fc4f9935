//! Manga109-style page annotations.
//!
//! Two XML dialects live here:
//!
//! * the raw page format, with flat `<panel/>`, `<character/>`, `<face/>`,
//!   `<text>` children and a `<link text_index="" character=""/>` list for
//!   dialogue/speaker pairs ([`parse_page_annotation`],
//!   [`serialize_page_annotation`]);
//! * the enriched format consumed by the captioning client, where panels are
//!   emitted in reading order and nest `character` and `text` elements
//!   ([`build_enriched_xml`], [`EnrichedPage`]).

use std::io::Cursor;

use quick_xml::events::{BytesEnd, BytesStart, BytesText, Event};
use quick_xml::{Reader, Writer};

use crate::bbox::BBox;
use crate::error::{Error, Result, ValidationReport, Violation};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PanelAnnotation {
    pub bbox: BBox,
    pub order_index: Option<u32>,
    pub caption: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NamedBox {
    pub name: String,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextBox {
    pub content: String,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialogLink {
    pub text_index: usize,
    pub character: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PageAnnotation {
    pub page_id: String,
    pub width: u32,
    pub height: u32,
    pub panels: Vec<PanelAnnotation>,
    pub characters: Vec<NamedBox>,
    pub faces: Vec<NamedBox>,
    pub texts: Vec<TextBox>,
    pub dialog_links: Vec<DialogLink>,
}

impl PageAnnotation {
    pub fn new(page_id: impl Into<String>, width: u32, height: u32) -> Self {
        PageAnnotation {
            page_id: page_id.into(),
            width,
            height,
            panels: Vec::new(),
            characters: Vec::new(),
            faces: Vec::new(),
            texts: Vec::new(),
            dialog_links: Vec::new(),
        }
    }

    pub fn panel_boxes(&self) -> Vec<BBox> {
        self.panels.iter().map(|p| p.bbox).collect()
    }

    /// Checks every type invariant and reports each violation separately.
    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        if self.width == 0 || self.height == 0 {
            report.violations.push(Violation::EmptyPage);
        }
        let mut check = |element: String, b: &BBox| {
            if !b.is_valid() {
                report.violations.push(Violation::EmptyBox {
                    element: element.clone(),
                });
            }
            if !b.fits_in(self.width, self.height) {
                report.violations.push(Violation::OutOfPage { element });
            }
        };
        for (i, p) in self.panels.iter().enumerate() {
            check(format!("panel[{i}]"), &p.bbox);
        }
        for (i, c) in self.characters.iter().enumerate() {
            check(format!("character[{i}] {:?}", c.name), &c.bbox);
        }
        for (i, c) in self.faces.iter().enumerate() {
            check(format!("face[{i}] {:?}", c.name), &c.bbox);
        }
        for (i, t) in self.texts.iter().enumerate() {
            check(format!("text[{i}]"), &t.bbox);
        }
        for (i, link) in self.dialog_links.iter().enumerate() {
            if link.text_index >= self.texts.len() {
                report.violations.push(Violation::DanglingTextLink {
                    link: i,
                    text_index: link.text_index,
                });
            }
            if !self.characters.iter().any(|c| c.name == link.character) {
                report.violations.push(Violation::UnknownSpeaker {
                    link: i,
                    character: link.character.clone(),
                });
            }
        }
        let with_order = self.panels.iter().filter(|p| p.order_index.is_some()).count();
        if with_order > 0 && with_order < self.panels.len() {
            report.violations.push(Violation::PartialOrder);
        } else if with_order > 0 {
            let order: Vec<usize> = self
                .panels
                .iter()
                .map(|p| p.order_index.unwrap_or(u32::MAX) as usize)
                .collect();
            if !is_permutation(&order) {
                report.violations.push(Violation::OrderNotPermutation);
            }
        }
        report
    }

    /// The stored reading order, if every panel carries an index: position `i`
    /// of the result is the panel read `i`-th.
    pub fn stored_order(&self) -> Option<Vec<usize>> {
        let idx: Option<Vec<usize>> = self
            .panels
            .iter()
            .map(|p| p.order_index.map(|o| o as usize))
            .collect();
        let idx = idx?;
        if !is_permutation(&idx) {
            return None;
        }
        let mut order = vec![0; idx.len()];
        for (panel, &pos) in idx.iter().enumerate() {
            order[pos] = panel;
        }
        Some(order)
    }
}

pub fn is_permutation(p: &[usize]) -> bool {
    let mut seen = vec![false; p.len()];
    for &i in p {
        if i >= p.len() || seen[i] {
            return false;
        }
        seen[i] = true;
    }
    true
}

/// Result of parsing: the annotation plus warnings for ignored content.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedPage {
    pub annotation: PageAnnotation,
    pub warnings: Vec<String>,
}

fn line_col(text: &str, pos: usize) -> (usize, usize) {
    let pos = pos.min(text.len());
    let before = &text.as_bytes()[..pos];
    let line = before.iter().filter(|&&b| b == b'\n').count() + 1;
    let col = pos - before.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1) + 1;
    (line, col)
}

struct XmlCursor<'a> {
    text: &'a str,
    reader: Reader<&'a [u8]>,
}

impl<'a> XmlCursor<'a> {
    fn new(text: &'a str) -> Self {
        let mut reader = Reader::from_str(text);
        reader.config_mut().trim_text(false);
        XmlCursor { text, reader }
    }

    fn error_at(&self, pos: usize, message: impl Into<String>) -> Error {
        let (line, column) = line_col(self.text, pos);
        Error::XmlParse {
            line,
            column,
            message: message.into(),
        }
    }

    fn next(&mut self) -> Result<(Event<'a>, usize)> {
        let pos = self.reader.buffer_position() as usize;
        match self.reader.read_event() {
            Ok(ev) => Ok((ev, pos)),
            Err(e) => {
                let at = self.reader.error_position() as usize;
                Err(self.error_at(at, e.to_string()))
            }
        }
    }

    fn attrs(&self, e: &BytesStart<'_>, pos: usize) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for a in e.attributes() {
            let a = a.map_err(|err| self.error_at(pos, err.to_string()))?;
            let key = String::from_utf8_lossy(a.key.as_ref()).into_owned();
            let value = a
                .unescape_value()
                .map_err(|err| self.error_at(pos, err.to_string()))?
                .into_owned();
            out.push((key, value));
        }
        Ok(out)
    }

    /// Reads text content up to the matching end tag of `name`.
    fn text_until_end(&mut self, name: &[u8]) -> Result<String> {
        let mut content = String::new();
        loop {
            let (ev, pos) = self.next()?;
            match ev {
                Event::Text(t) => content.push_str(
                    &t.unescape()
                        .map_err(|err| self.error_at(pos, err.to_string()))?,
                ),
                Event::CData(c) => content.push_str(&String::from_utf8_lossy(&c)),
                Event::End(e) if e.name().as_ref() == name => return Ok(content),
                Event::Eof => return Err(self.error_at(pos, "unexpected end of document")),
                Event::Start(_) | Event::Empty(_) => {
                    return Err(self.error_at(pos, "unexpected element inside text"))
                }
                _ => {}
            }
        }
    }

    fn skip_element(&mut self, name: &[u8]) -> Result<()> {
        let mut depth = 1usize;
        loop {
            let (ev, pos) = self.next()?;
            match ev {
                Event::Start(e) if e.name().as_ref() == name => depth += 1,
                Event::End(e) if e.name().as_ref() == name => {
                    depth -= 1;
                    if depth == 0 {
                        return Ok(());
                    }
                }
                Event::Eof => return Err(self.error_at(pos, "unexpected end of document")),
                _ => {}
            }
        }
    }
}

fn find<'b>(attrs: &'b [(String, String)], key: &str) -> Option<&'b str> {
    attrs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}

fn parse_uint(cur: &XmlCursor<'_>, pos: usize, key: &str, v: &str) -> Result<u32> {
    let s = v.trim();
    if !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit()) {
        s.parse::<u32>()
            .map_err(|e| cur.error_at(pos, format!("attribute {key}: {e}")))
    } else {
        Err(cur.error_at(
            pos,
            format!("attribute {key}: expected a non-negative integer, got {v:?}"),
        ))
    }
}

fn required<'b>(
    cur: &XmlCursor<'_>,
    pos: usize,
    elem: &str,
    attrs: &'b [(String, String)],
    key: &str,
) -> Result<&'b str> {
    find(attrs, key).ok_or_else(|| cur.error_at(pos, format!("<{elem}> is missing attribute {key}")))
}

fn parse_box(cur: &XmlCursor<'_>, pos: usize, elem: &str, attrs: &[(String, String)]) -> Result<BBox> {
    let mut v = [0u32; 4];
    for (slot, key) in v.iter_mut().zip(["xmin", "ymin", "xmax", "ymax"]) {
        *slot = parse_uint(cur, pos, key, required(cur, pos, elem, attrs, key)?)?;
    }
    Ok(BBox::new(v[0], v[1], v[2], v[3]))
}

/// Parses the raw page format and validates the result.
pub fn parse_page_annotation(xml_text: &str) -> Result<ParsedPage> {
    let mut cur = XmlCursor::new(xml_text);
    let mut warnings = Vec::new();
    let mut page: Option<PageAnnotation> = None;
    let mut closed = false;

    loop {
        let (ev, pos) = cur.next()?;
        let (e, is_empty) = match ev {
            Event::Eof => break,
            Event::Start(e) => (e, false),
            Event::Empty(e) => (e, true),
            Event::End(e) => {
                if e.name().as_ref() == b"page" {
                    closed = true;
                }
                continue;
            }
            Event::Text(t) => {
                if !t.iter().all(|b| b.is_ascii_whitespace()) {
                    warnings.push(format!(
                        "ignored stray text at line {}",
                        line_col(xml_text, pos).0
                    ));
                }
                continue;
            }
            _ => continue,
        };
        let name = String::from_utf8_lossy(e.name().as_ref()).into_owned();
        let attrs = cur.attrs(&e, pos)?;

        if name == "page" {
            if page.is_some() {
                return Err(cur.error_at(pos, "nested or repeated <page> element"));
            }
            let width = parse_uint(&cur, pos, "width", required(&cur, pos, "page", &attrs, "width")?)?;
            let height =
                parse_uint(&cur, pos, "height", required(&cur, pos, "page", &attrs, "height")?)?;
            let id = find(&attrs, "id").unwrap_or_default();
            page = Some(PageAnnotation::new(id, width, height));
            if is_empty {
                closed = true;
            }
            continue;
        }

        let Some(p) = page.as_mut() else {
            return Err(cur.error_at(pos, format!("<{name}> outside of <page>")));
        };
        if closed {
            return Err(cur.error_at(pos, format!("<{name}> after </page>")));
        }
        match name.as_str() {
            "panel" => {
                let bbox = parse_box(&cur, pos, "panel", &attrs)?;
                let order_index = find(&attrs, "order")
                    .map(|v| parse_uint(&cur, pos, "order", v))
                    .transpose()?;
                let caption = find(&attrs, "caption").map(str::to_owned);
                p.panels.push(PanelAnnotation {
                    bbox,
                    order_index,
                    caption,
                });
                if !is_empty {
                    cur.skip_element(b"panel")?;
                }
            }
            "character" | "face" => {
                let bbox = parse_box(&cur, pos, &name, &attrs)?;
                let nb = NamedBox {
                    name: required(&cur, pos, &name, &attrs, "name")?.to_owned(),
                    bbox,
                };
                if name == "character" {
                    p.characters.push(nb);
                } else {
                    p.faces.push(nb);
                }
                if !is_empty {
                    cur.skip_element(name.as_bytes())?;
                }
            }
            "text" => {
                let bbox = parse_box(&cur, pos, "text", &attrs)?;
                let content = if is_empty {
                    String::new()
                } else {
                    cur.text_until_end(b"text")?
                };
                p.texts.push(TextBox { content, bbox });
            }
            "link" => {
                let ti = required(&cur, pos, "link", &attrs, "text_index")?;
                let text_index = parse_uint(&cur, pos, "text_index", ti)? as usize;
                let character = required(&cur, pos, "link", &attrs, "character")?.to_owned();
                p.dialog_links.push(DialogLink {
                    text_index,
                    character,
                });
                if !is_empty {
                    cur.skip_element(b"link")?;
                }
            }
            other => {
                warnings.push(format!(
                    "ignored unknown element <{other}> at line {}",
                    line_col(xml_text, pos).0
                ));
                if !is_empty {
                    cur.skip_element(e.name().as_ref())?;
                }
            }
        }
    }

    let annotation = page.ok_or_else(|| cur.error_at(xml_text.len(), "no <page> element"))?;
    if !closed {
        return Err(cur.error_at(xml_text.len(), "unclosed <page> element"));
    }
    let report = annotation.validate();
    if !report.is_ok() {
        return Err(Error::Validation(report));
    }
    Ok(ParsedPage {
        annotation,
        warnings,
    })
}

fn box_attrs<'b>(e: &mut BytesStart<'b>, b: &BBox) {
    e.push_attribute(("xmin", b.xmin.to_string().as_str()));
    e.push_attribute(("ymin", b.ymin.to_string().as_str()));
    e.push_attribute(("xmax", b.xmax.to_string().as_str()));
    e.push_attribute(("ymax", b.ymax.to_string().as_str()));
}

fn xml_writer() -> Writer<Cursor<Vec<u8>>> {
    Writer::new_with_indent(Cursor::new(Vec::new()), b' ', 2)
}

fn finish(w: Writer<Cursor<Vec<u8>>>) -> String {
    let mut s = String::from_utf8(w.into_inner().into_inner()).expect("writer emits utf-8");
    s.push('\n');
    s
}

fn write_text(w: &mut Writer<Cursor<Vec<u8>>>, b: &BBox, content: &str) -> std::io::Result<()> {
    let mut e = BytesStart::new("text");
    box_attrs(&mut e, b);
    w.write_event(Event::Start(e))?;
    w.write_event(Event::Text(BytesText::new(content)))?;
    w.write_event(Event::End(BytesEnd::new("text")))
}

/// Serializes to the raw page format. Refuses invalid annotations.
pub fn serialize_page_annotation(a: &PageAnnotation) -> Result<String> {
    let report = a.validate();
    if !report.is_ok() {
        return Err(Error::Validation(report));
    }
    let mut w = xml_writer();
    let io = |e: std::io::Error| Error::Io(e);
    let mut page = BytesStart::new("page");
    page.push_attribute(("id", a.page_id.as_str()));
    page.push_attribute(("width", a.width.to_string().as_str()));
    page.push_attribute(("height", a.height.to_string().as_str()));
    w.write_event(Event::Start(page)).map_err(io)?;
    for p in &a.panels {
        let mut e = BytesStart::new("panel");
        if let Some(o) = p.order_index {
            e.push_attribute(("order", o.to_string().as_str()));
        }
        box_attrs(&mut e, &p.bbox);
        if let Some(c) = &p.caption {
            e.push_attribute(("caption", c.as_str()));
        }
        w.write_event(Event::Empty(e)).map_err(io)?;
    }
    for (tag, list) in [("character", &a.characters), ("face", &a.faces)] {
        for c in list {
            let mut e = BytesStart::new(tag);
            e.push_attribute(("name", c.name.as_str()));
            box_attrs(&mut e, &c.bbox);
            w.write_event(Event::Empty(e)).map_err(io)?;
        }
    }
    for t in &a.texts {
        write_text(&mut w, &t.bbox, &t.content).map_err(io)?;
    }
    for l in &a.dialog_links {
        let mut e = BytesStart::new("link");
        e.push_attribute(("text_index", l.text_index.to_string().as_str()));
        e.push_attribute(("character", l.character.as_str()));
        w.write_event(Event::Empty(e)).map_err(io)?;
    }
    w.write_event(Event::End(BytesEnd::new("page"))).map_err(io)?;
    Ok(finish(w))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnrichedText {
    /// Index into the source annotation's `texts`.
    pub text_index: usize,
    pub bbox: BBox,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnrichedCharacter {
    /// Index into the source annotation's `characters`.
    pub character_index: usize,
    pub name: String,
    pub bbox: BBox,
    pub texts: Vec<EnrichedText>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnrichedPanel {
    /// Index into the source annotation's `panels`.
    pub panel_index: usize,
    pub bbox: BBox,
    pub characters: Vec<EnrichedCharacter>,
    /// Lines whose speaker is absent from this panel (or unknown).
    pub texts: Vec<EnrichedText>,
}

/// Page tree with panels in reading order: panel → character → text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnrichedPage {
    pub page_id: String,
    pub width: u32,
    pub height: u32,
    pub panels: Vec<EnrichedPanel>,
    /// Characters whose box center lies in no panel.
    pub unassigned_characters: Vec<EnrichedCharacter>,
    /// Texts whose box center lies in no panel.
    pub unassigned_texts: Vec<EnrichedText>,
}

/// Panel owning a box: the panel containing the box center, ties broken by
/// largest intersection area, then lowest index.
fn owning_panel(panels: &[PanelAnnotation], b: &BBox) -> Option<usize> {
    let (cx, cy) = b.center();
    panels
        .iter()
        .enumerate()
        .filter(|(_, p)| p.bbox.contains_point(cx, cy))
        .max_by(|(i, p), (j, q)| {
            p.bbox
                .intersection_area(b)
                .cmp(&q.bbox.intersection_area(b))
                .then(j.cmp(i))
        })
        .map(|(i, _)| i)
}

pub fn build_enriched_xml(a: &PageAnnotation, order: &[usize]) -> Result<EnrichedPage> {
    if order.len() != a.panels.len() || !is_permutation(order) {
        return Err(Error::InvalidArgument(format!(
            "panel order {order:?} is not a permutation of 0..{}",
            a.panels.len()
        )));
    }
    let mut by_panel: Vec<Vec<EnrichedCharacter>> = vec![Vec::new(); a.panels.len()];
    let mut unassigned_characters = Vec::new();
    let mut char_panel = Vec::with_capacity(a.characters.len());
    for (ci, c) in a.characters.iter().enumerate() {
        let ec = EnrichedCharacter {
            character_index: ci,
            name: c.name.clone(),
            bbox: c.bbox,
            texts: Vec::new(),
        };
        let owner = owning_panel(&a.panels, &c.bbox);
        char_panel.push(owner);
        match owner {
            Some(p) => by_panel[p].push(ec),
            None => unassigned_characters.push(ec),
        }
    }

    let mut panel_texts: Vec<Vec<EnrichedText>> = vec![Vec::new(); a.panels.len()];
    let mut unassigned_texts = Vec::new();
    for (ti, t) in a.texts.iter().enumerate() {
        let et = EnrichedText {
            text_index: ti,
            bbox: t.bbox,
            content: t.content.clone(),
        };
        let Some(p) = owning_panel(&a.panels, &t.bbox) else {
            unassigned_texts.push(et);
            continue;
        };
        let speaker = a
            .dialog_links
            .iter()
            .find(|l| l.text_index == ti)
            .map(|l| l.character.as_str());
        let slot = speaker.and_then(|name| by_panel[p].iter_mut().find(|c| c.name == name));
        match slot {
            Some(c) => c.texts.push(et),
            None => panel_texts[p].push(et),
        }
    }

    let mut by_panel: Vec<Option<(Vec<EnrichedCharacter>, Vec<EnrichedText>)>> = by_panel
        .into_iter()
        .zip(panel_texts)
        .map(Some)
        .collect();
    let panels = order
        .iter()
        .map(|&pi| {
            let (characters, texts) = by_panel[pi].take().expect("permutation visits once");
            EnrichedPanel {
                panel_index: pi,
                bbox: a.panels[pi].bbox,
                characters,
                texts,
            }
        })
        .collect();
    Ok(EnrichedPage {
        page_id: a.page_id.clone(),
        width: a.width,
        height: a.height,
        panels,
        unassigned_characters,
        unassigned_texts,
    })
}

impl EnrichedPage {
    pub fn panel_count(&self) -> usize {
        self.panels.len()
    }

    /// All dialogue lines of panel `i`, speaker-attributed lines first.
    pub fn panel_lines(&self, i: usize) -> Vec<(Option<&str>, &str)> {
        let p = &self.panels[i];
        let mut out = Vec::new();
        for c in &p.characters {
            for t in &c.texts {
                out.push((Some(c.name.as_str()), t.content.as_str()));
            }
        }
        for t in &p.texts {
            out.push((None, t.content.as_str()));
        }
        out
    }

    pub fn to_xml(&self) -> String {
        self.write().expect("writing to memory cannot fail")
    }

    fn write(&self) -> std::io::Result<String> {
        let mut w = xml_writer();
        let mut page = BytesStart::new("page");
        page.push_attribute(("id", self.page_id.as_str()));
        page.push_attribute(("width", self.width.to_string().as_str()));
        page.push_attribute(("height", self.height.to_string().as_str()));
        w.write_event(Event::Start(page))?;
        let write_char = |w: &mut Writer<Cursor<Vec<u8>>>, c: &EnrichedCharacter| {
            let mut e = BytesStart::new("character");
            e.push_attribute(("name", c.name.as_str()));
            box_attrs(&mut e, &c.bbox);
            if c.texts.is_empty() {
                return w.write_event(Event::Empty(e));
            }
            w.write_event(Event::Start(e))?;
            for t in &c.texts {
                write_text(w, &t.bbox, &t.content)?;
            }
            w.write_event(Event::End(BytesEnd::new("character")))
        };
        for (pos, p) in self.panels.iter().enumerate() {
            let mut e = BytesStart::new("panel");
            e.push_attribute(("order", pos.to_string().as_str()));
            box_attrs(&mut e, &p.bbox);
            if p.characters.is_empty() && p.texts.is_empty() {
                w.write_event(Event::Empty(e))?;
                continue;
            }
            w.write_event(Event::Start(e))?;
            for c in &p.characters {
                write_char(&mut w, c)?;
            }
            for t in &p.texts {
                write_text(&mut w, &t.bbox, &t.content)?;
            }
            w.write_event(Event::End(BytesEnd::new("panel")))?;
        }
        if !self.unassigned_characters.is_empty() || !self.unassigned_texts.is_empty() {
            w.write_event(Event::Start(BytesStart::new("unassigned")))?;
            for c in &self.unassigned_characters {
                write_char(&mut w, c)?;
            }
            for t in &self.unassigned_texts {
                write_text(&mut w, &t.bbox, &t.content)?;
            }
            w.write_event(Event::End(BytesEnd::new("unassigned")))?;
        }
        w.write_event(Event::End(BytesEnd::new("page")))?;
        Ok(finish(w))
    }

    /// Parses the enriched dialect. Source indices are not part of the wire
    /// format and are renumbered in document order.
    pub fn parse(xml_text: &str) -> Result<EnrichedPage> {
        #[derive(PartialEq)]
        enum Scope {
            Page,
            Panel,
            Character,
            Unassigned,
            UnassignedCharacter,
        }
        let mut cur = XmlCursor::new(xml_text);
        let mut page: Option<EnrichedPage> = None;
        let mut scope = Vec::<Scope>::new();
        let (mut n_chars, mut n_texts) = (0usize, 0usize);
        loop {
            let (ev, pos) = cur.next()?;
            let (e, is_empty) = match ev {
                Event::Eof => break,
                Event::Start(e) => (e, false),
                Event::Empty(e) => (e, true),
                Event::End(_) => {
                    scope.pop();
                    continue;
                }
                _ => continue,
            };
            let name = String::from_utf8_lossy(e.name().as_ref()).into_owned();
            let attrs = cur.attrs(&e, pos)?;
            let misplaced = || {
                let (line, column) = line_col(xml_text, pos);
                Error::XmlParse {
                    line,
                    column,
                    message: format!("misplaced <{name}>"),
                }
            };
            match (name.as_str(), scope.last()) {
                ("page", None) => {
                    let width = parse_uint(&cur, pos, "width", required(&cur, pos, "page", &attrs, "width")?)?;
                    let height =
                        parse_uint(&cur, pos, "height", required(&cur, pos, "page", &attrs, "height")?)?;
                    page = Some(EnrichedPage {
                        page_id: find(&attrs, "id").unwrap_or_default().to_owned(),
                        width,
                        height,
                        panels: Vec::new(),
                        unassigned_characters: Vec::new(),
                        unassigned_texts: Vec::new(),
                    });
                    if !is_empty {
                        scope.push(Scope::Page);
                    }
                }
                ("panel", Some(Scope::Page)) => {
                    let p = page.as_mut().ok_or_else(misplaced)?;
                    let bbox = parse_box(&cur, pos, "panel", &attrs)?;
                    p.panels.push(EnrichedPanel {
                        panel_index: p.panels.len(),
                        bbox,
                        characters: Vec::new(),
                        texts: Vec::new(),
                    });
                    if !is_empty {
                        scope.push(Scope::Panel);
                    }
                }
                ("unassigned", Some(Scope::Page)) => {
                    if !is_empty {
                        scope.push(Scope::Unassigned);
                    }
                }
                ("character", Some(s @ (Scope::Panel | Scope::Unassigned))) => {
                    let in_panel = *s == Scope::Panel;
                    let p = page.as_mut().ok_or_else(misplaced)?;
                    let c = EnrichedCharacter {
                        character_index: n_chars,
                        name: required(&cur, pos, "character", &attrs, "name")?.to_owned(),
                        bbox: parse_box(&cur, pos, "character", &attrs)?,
                        texts: Vec::new(),
                    };
                    n_chars += 1;
                    if in_panel {
                        p.panels.last_mut().ok_or_else(misplaced)?.characters.push(c);
                    } else {
                        p.unassigned_characters.push(c);
                    }
                    if !is_empty {
                        scope.push(if in_panel {
                            Scope::Character
                        } else {
                            Scope::UnassignedCharacter
                        });
                    }
                }
                ("text", Some(_)) => {
                    let bbox = parse_box(&cur, pos, "text", &attrs)?;
                    let content = if is_empty {
                        String::new()
                    } else {
                        cur.text_until_end(b"text")?
                    };
                    let t = EnrichedText {
                        text_index: n_texts,
                        bbox,
                        content,
                    };
                    n_texts += 1;
                    let p = page.as_mut().ok_or_else(misplaced)?;
                    match scope.last() {
                        Some(Scope::Panel) => p.panels.last_mut().ok_or_else(misplaced)?.texts.push(t),
                        Some(Scope::Character) => p
                            .panels
                            .last_mut()
                            .and_then(|pp| pp.characters.last_mut())
                            .ok_or_else(misplaced)?
                            .texts
                            .push(t),
                        Some(Scope::Unassigned) => p.unassigned_texts.push(t),
                        Some(Scope::UnassignedCharacter) => p
                            .unassigned_characters
                            .last_mut()
                            .ok_or_else(misplaced)?
                            .texts
                            .push(t),
                        _ => return Err(misplaced()),
                    }
                }
                _ => return Err(misplaced()),
            }
        }
        page.ok_or_else(|| cur.error_at(xml_text.len(), "no <page> element"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const ONE_PANEL: &str = r#"<page id="p1" width="100" height="80">
  <panel xmin="0" ymin="0" xmax="100" ymax="80"/>
</page>"#;

    #[test]
    fn single_panel_page() {
        let parsed = parse_page_annotation(ONE_PANEL).unwrap();
        let a = parsed.annotation;
        assert_eq!((a.width, a.height), (100, 80));
        assert_eq!(a.panels.len(), 1);
        assert_eq!(a.panels[0].bbox, BBox::new(0, 0, 100, 80));
        assert!(parsed.warnings.is_empty());
    }

    #[test]
    fn text_linked_to_character() {
        let xml = r#"<page id="p" width="100" height="100">
  <panel xmin="0" ymin="0" xmax="100" ymax="100"/>
  <character name="A" xmin="10" ymin="10" xmax="30" ymax="30"/>
  <text xmin="40" ymin="40" xmax="60" ymax="60">hello &amp; bye</text>
  <link text_index="0" character="A"/>
</page>"#;
        let a = parse_page_annotation(xml).unwrap().annotation;
        assert_eq!(
            a.dialog_links,
            vec![DialogLink {
                text_index: 0,
                character: "A".into()
            }]
        );
        assert_eq!(a.texts[0].content, "hello & bye");
    }

    #[test]
    fn inverted_box_is_a_validation_error() {
        let xml = r#"<page id="p" width="100" height="100"><panel xmin="50" ymin="0" xmax="10" ymax="10"/></page>"#;
        match parse_page_annotation(xml) {
            Err(Error::Validation(r)) => assert_eq!(
                r.violations,
                vec![Violation::EmptyBox {
                    element: "panel[0]".into()
                }]
            ),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn box_outside_page_names_the_element() {
        let xml = r#"<page id="p" width="100" height="100">
<character name="B" xmin="50" ymin="0" xmax="101" ymax="10"/></page>"#;
        let err = parse_page_annotation(xml).unwrap_err();
        assert!(err.to_string().contains("character[0] \"B\""), "{err}");
    }

    #[test]
    fn malformed_xml_reports_position() {
        let xml = "<page id=\"p\" width=\"10\" height=\"10\">\n  <panel xmin=\"0\" ymin=\"0\" xmax=\"5\" ymax=\"5\">\n</page>";
        match parse_page_annotation(xml) {
            Err(Error::XmlParse { line, .. }) => assert!(line >= 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn fractional_coordinates_are_rejected() {
        let xml = r#"<page id="p" width="10" height="10"><panel xmin="0.5" ymin="0" xmax="5" ymax="5"/></page>"#;
        assert!(matches!(
            parse_page_annotation(xml),
            Err(Error::XmlParse { line: 1, .. })
        ));
    }

    #[test]
    fn unknown_elements_produce_warnings() {
        let xml = r#"<page id="p" width="10" height="10"><frame a="1"><x/></frame><panel xmin="0" ymin="0" xmax="5" ymax="5"/></page>"#;
        let parsed = parse_page_annotation(xml).unwrap();
        assert_eq!(parsed.warnings.len(), 1);
        assert_eq!(parsed.annotation.panels.len(), 1);
    }

    #[test]
    fn dangling_links_and_bad_order_are_distinct_violations() {
        let mut a = PageAnnotation::new("p", 10, 10);
        a.panels.push(PanelAnnotation {
            bbox: BBox::new(0, 0, 5, 5),
            order_index: Some(1),
            caption: None,
        });
        a.dialog_links.push(DialogLink {
            text_index: 3,
            character: "Z".into(),
        });
        let r = a.validate();
        assert_eq!(
            r.violations,
            vec![
                Violation::DanglingTextLink {
                    link: 0,
                    text_index: 3
                },
                Violation::UnknownSpeaker {
                    link: 0,
                    character: "Z".into()
                },
                Violation::OrderNotPermutation,
            ]
        );
        assert!(serialize_page_annotation(&a).is_err());
    }

    #[test]
    fn partial_order_is_flagged() {
        let mut a = PageAnnotation::new("p", 10, 10);
        for o in [Some(0), None] {
            a.panels.push(PanelAnnotation {
                bbox: BBox::new(0, 0, 5, 5),
                order_index: o,
                caption: None,
            });
        }
        assert_eq!(a.validate().violations, vec![Violation::PartialOrder]);
    }

    fn panel(b: BBox) -> PanelAnnotation {
        PanelAnnotation {
            bbox: b,
            order_index: None,
            caption: None,
        }
    }

    #[test]
    fn round_trip_simple_cases() {
        let a = parse_page_annotation(ONE_PANEL).unwrap().annotation;
        let back = parse_page_annotation(&serialize_page_annotation(&a).unwrap()).unwrap();
        assert_eq!(back.annotation, a);

        let empty = PageAnnotation::new("empty", 30, 20);
        let back = parse_page_annotation(&serialize_page_annotation(&empty).unwrap()).unwrap();
        assert_eq!(back.annotation, empty);
    }

    #[test]
    fn round_trip_preserves_order_indices() {
        let mut a = PageAnnotation::new("o", 100, 100);
        for (i, o) in [3u32, 1, 2, 0].into_iter().enumerate() {
            let x = i as u32 * 20;
            a.panels.push(PanelAnnotation {
                bbox: BBox::new(x, 0, x + 20, 50),
                order_index: Some(o),
                caption: Some(format!("cap <{i}> \"q\"")),
            });
        }
        let xml = serialize_page_annotation(&a).unwrap();
        let back = parse_page_annotation(&xml).unwrap().annotation;
        assert_eq!(back, a);
        assert_eq!(a.stored_order(), Some(vec![3, 1, 2, 0]));
    }

    #[test]
    fn enriched_nests_character_by_center() {
        let mut a = PageAnnotation::new("e", 100, 50);
        a.panels.push(panel(BBox::new(0, 0, 50, 50)));
        a.panels.push(panel(BBox::new(50, 0, 100, 50)));
        a.characters.push(NamedBox {
            name: "A".into(),
            bbox: BBox::new(60, 10, 90, 40),
        });
        let e = build_enriched_xml(&a, &[0, 1]).unwrap();
        assert!(e.panels[0].characters.is_empty());
        assert_eq!(e.panels[1].characters.len(), 1);
        assert_eq!(e.panels[1].characters[0].name, "A");
    }

    #[test]
    fn enriched_without_characters_has_empty_panels() {
        let mut a = PageAnnotation::new("e", 100, 50);
        a.panels.push(panel(BBox::new(0, 0, 50, 50)));
        a.panels.push(panel(BBox::new(50, 0, 100, 50)));
        let e = build_enriched_xml(&a, &[1, 0]).unwrap();
        assert_eq!(e.panels.len(), 2);
        assert_eq!(e.panels[0].panel_index, 1);
        assert!(e.panels.iter().all(|p| p.characters.is_empty() && p.texts.is_empty()));
        let xml = e.to_xml();
        assert!(xml.contains(r#"<panel order="0" xmin="50""#), "{xml}");
    }

    #[test]
    fn text_with_absent_speaker_attaches_to_panel() {
        let mut a = PageAnnotation::new("e", 100, 50);
        a.panels.push(panel(BBox::new(0, 0, 50, 50)));
        a.panels.push(panel(BBox::new(50, 0, 100, 50)));
        a.characters.push(NamedBox {
            name: "A".into(),
            bbox: BBox::new(5, 5, 20, 20),
        });
        a.characters.push(NamedBox {
            name: "B".into(),
            bbox: BBox::new(55, 5, 70, 20),
        });
        // Line in panel 1 spoken by A, who only appears in panel 0.
        a.texts.push(TextBox {
            content: "off-panel".into(),
            bbox: BBox::new(80, 30, 95, 45),
        });
        a.texts.push(TextBox {
            content: "on-panel".into(),
            bbox: BBox::new(20, 30, 40, 45),
        });
        a.dialog_links.push(DialogLink {
            text_index: 0,
            character: "A".into(),
        });
        a.dialog_links.push(DialogLink {
            text_index: 1,
            character: "A".into(),
        });
        let e = build_enriched_xml(&a, &[0, 1]).unwrap();
        assert_eq!(e.panels[1].texts.len(), 1);
        assert_eq!(e.panels[1].texts[0].content, "off-panel");
        assert!(e.panels[1].characters[0].texts.is_empty());
        assert_eq!(e.panels[0].characters[0].texts[0].content, "on-panel");
    }

    #[test]
    fn overlapping_panels_break_ties_by_intersection() {
        let mut a = PageAnnotation::new("e", 100, 100);
        a.panels.push(panel(BBox::new(0, 0, 60, 100)));
        a.panels.push(panel(BBox::new(40, 0, 100, 100)));
        // Center (50, 50) lies in both; more area in panel 1.
        a.characters.push(NamedBox {
            name: "C".into(),
            bbox: BBox::new(38, 40, 62, 60),
        });
        let e = build_enriched_xml(&a, &[0, 1]).unwrap();
        // Equal areas (22 columns each): lower index wins.
        assert_eq!(e.panels[0].characters.len(), 1);
        a.characters[0].bbox = BBox::new(42, 40, 58, 60);
        let e = build_enriched_xml(&a, &[0, 1]).unwrap();
        assert_eq!(e.panels[0].characters.len(), 1);
        a.characters[0].bbox = BBox::new(45, 40, 65, 60);
        let e = build_enriched_xml(&a, &[0, 1]).unwrap();
        assert_eq!(e.panels[1].characters.len(), 1);
    }

    #[test]
    fn character_outside_all_panels_is_unassigned() {
        let mut a = PageAnnotation::new("e", 100, 100);
        a.panels.push(panel(BBox::new(0, 0, 40, 40)));
        a.characters.push(NamedBox {
            name: "X".into(),
            bbox: BBox::new(60, 60, 90, 90),
        });
        let e = build_enriched_xml(&a, &[0]).unwrap();
        assert_eq!(e.unassigned_characters.len(), 1);
        let back = EnrichedPage::parse(&e.to_xml()).unwrap();
        assert_eq!(back.unassigned_characters.len(), 1);
    }

    #[test]
    fn order_must_be_a_permutation() {
        let mut a = PageAnnotation::new("e", 100, 100);
        a.panels.push(panel(BBox::new(0, 0, 40, 40)));
        a.panels.push(panel(BBox::new(50, 50, 90, 90)));
        assert!(build_enriched_xml(&a, &[0, 0]).is_err());
        assert!(build_enriched_xml(&a, &[0]).is_err());
    }

    #[test]
    fn enriched_xml_parses_back() {
        let mut a = PageAnnotation::new("e", 100, 50);
        a.panels.push(panel(BBox::new(0, 0, 50, 50)));
        a.panels.push(panel(BBox::new(50, 0, 100, 50)));
        a.characters.push(NamedBox {
            name: "A".into(),
            bbox: BBox::new(5, 5, 20, 20),
        });
        a.texts.push(TextBox {
            content: "hi".into(),
            bbox: BBox::new(20, 30, 40, 45),
        });
        a.dialog_links.push(DialogLink {
            text_index: 0,
            character: "A".into(),
        });
        let e = build_enriched_xml(&a, &[1, 0]).unwrap();
        let back = EnrichedPage::parse(&e.to_xml()).unwrap();
        assert_eq!(back.panels.len(), 2);
        assert_eq!(back.panels[1].bbox, BBox::new(0, 0, 50, 50));
        assert_eq!(back.panel_lines(1), vec![(Some("A"), "hi")]);
        assert!(back.panel_lines(0).is_empty());
    }
}
