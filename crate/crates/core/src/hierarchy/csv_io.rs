use super::{HierNode, Hierarchy, HierarchyError};

pub const CSV_HEADER: [&str; 4] = ["node_id", "parent_id", "level", "count"];

/// Parses `node_id,parent_id,level,count` rows. The root row leaves
/// `parent_id` empty.
pub fn parse_hierarchy(csv_text: &str) -> Result<Hierarchy, HierarchyError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(csv_text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| HierarchyError::Csv(e.to_string()))?;
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(HierarchyError::BadHeader(
            header.iter().collect::<Vec<_>>().join(","),
        ));
    }

    let mut nodes = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| HierarchyError::Csv(e.to_string()))?;
        let id = record[0].to_owned();
        if id.is_empty() {
            return Err(HierarchyError::BadField {
                row,
                field: "node_id",
                value: id,
            });
        }
        let parent_id = Some(&record[1])
            .filter(|p| !p.is_empty())
            .map(str::to_owned);
        let level = record[2]
            .parse::<usize>()
            .ok()
            .filter(|&l| l >= 1)
            .ok_or_else(|| HierarchyError::BadField {
                row,
                field: "level",
                value: record[2].to_owned(),
            })?;
        let count = record[3]
            .parse::<f64>()
            .ok()
            .filter(|c| !c.is_nan())
            .ok_or_else(|| HierarchyError::BadField {
                row,
                field: "count",
                value: record[3].to_owned(),
            })?;
        nodes.push(HierNode {
            id,
            parent_id,
            level,
            count,
        });
    }
    Hierarchy::from_nodes(nodes)
}

impl Hierarchy {
    /// CSV rows in level order then id order. Counts use the shortest
    /// representation that parses back to the same `f64`.
    pub fn to_csv(&self) -> String {
        write_rows(self, |i| Some(self.node(i).count))
    }
}

/// Writes the hierarchy schema with counts supplied per node index; rows
/// for which `count` returns `None` are skipped.
pub(crate) fn write_rows(h: &Hierarchy, count: impl Fn(usize) -> Option<f64>) -> String {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("write to Vec");
    for (i, node) in h.nodes().iter().enumerate() {
        let Some(c) = count(i) else { continue };
        let level = node.level.to_string();
        let c = c.to_string();
        w.write_record([
            node.id.as_str(),
            node.parent_id.as_deref().unwrap_or(""),
            level.as_str(),
            c.as_str(),
        ])
        .expect("write to Vec");
    }
    String::from_utf8(w.into_inner().expect("flush Vec")).expect("csv output is utf-8")
}
