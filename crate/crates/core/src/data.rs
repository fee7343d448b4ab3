//! Person-by-item response data partitioned into groups.
//!
//! The CSV layout is `person,group,<item>,...` with cells `0`, `1` or empty
//! for a missing response. Group 0 is the reference group; groups are indexed
//! in order of first appearance unless an explicit order is supplied.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ResponseMatrix {
    person_ids: Vec<String>,
    group_names: Vec<String>,
    group_of_person: Vec<usize>,
    item_ids: Vec<String>,
    responses: Vec<Option<bool>>,
}

impl ResponseMatrix {
    /// `responses` is row-major, one row of `item_ids.len()` cells per person.
    pub fn new(
        person_ids: Vec<String>,
        group_names: Vec<String>,
        group_of_person: Vec<usize>,
        item_ids: Vec<String>,
        responses: Vec<Option<bool>>,
    ) -> Result<Self> {
        let n_items = item_ids.len();
        if n_items < 2 {
            return Err(Error::Data("at least two items are required".into()));
        }
        if person_ids.is_empty() {
            return Err(Error::Data("no persons".into()));
        }
        if group_of_person.len() != person_ids.len() {
            return Err(Error::Data("one group index per person is required".into()));
        }
        if responses.len() != person_ids.len() * n_items {
            return Err(Error::Data(format!(
                "expected {} response cells, got {}",
                person_ids.len() * n_items,
                responses.len()
            )));
        }
        if let Some(&g) = group_of_person.iter().find(|&&g| g >= group_names.len()) {
            return Err(Error::Data(format!("person mapped to undeclared group {g}")));
        }
        for (p, row) in responses.chunks(n_items).enumerate() {
            if row.iter().all(Option::is_none) {
                return Err(Error::Data(format!(
                    "person `{}` has no observed responses",
                    person_ids[p]
                )));
            }
        }
        Ok(ResponseMatrix {
            person_ids,
            group_names,
            group_of_person,
            item_ids,
            responses,
        })
    }

    pub fn n_persons(&self) -> usize {
        self.person_ids.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn n_groups(&self) -> usize {
        self.group_names.len()
    }

    pub fn person_ids(&self) -> &[String] {
        &self.person_ids
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn group_names(&self) -> &[String] {
        &self.group_names
    }

    pub fn group_of_person(&self) -> &[usize] {
        &self.group_of_person
    }

    #[inline]
    pub fn group(&self, person: usize) -> usize {
        self.group_of_person[person]
    }

    #[inline]
    pub fn get(&self, person: usize, item: usize) -> Option<bool> {
        self.responses[person * self.item_ids.len() + item]
    }

    #[inline]
    pub fn row(&self, person: usize) -> &[Option<bool>] {
        let k = self.item_ids.len();
        &self.responses[person * k..(person + 1) * k]
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_groups()];
        for &g in &self.group_of_person {
            sizes[g] += 1;
        }
        sizes
    }

    pub fn persons_in_group(&self, group: usize) -> impl Iterator<Item = usize> + '_ {
        self.group_of_person
            .iter()
            .enumerate()
            .filter(move |(_, &g)| g == group)
            .map(|(p, _)| p)
    }

    pub fn item_index(&self, id: &str) -> Option<usize> {
        self.item_ids.iter().position(|i| i == id)
    }

    /// Reorders groups so that `reference` becomes group 0.
    pub fn with_reference(mut self, reference: &str) -> Result<Self> {
        let r = self
            .group_names
            .iter()
            .position(|g| g == reference)
            .ok_or_else(|| Error::Data(format!("unknown reference group `{reference}`")))?;
        if r == 0 {
            return Ok(self);
        }
        let name = self.group_names.remove(r);
        self.group_names.insert(0, name);
        for g in &mut self.group_of_person {
            *g = match *g {
                x if x == r => 0,
                x if x < r => x + 1,
                x => x,
            };
        }
        Ok(self)
    }

    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.len() < 4 || &headers[0] != "person" || &headers[1] != "group" {
            return Err(Error::Data(
                "header must be `person,group,<item>,<item>,...`".into(),
            ));
        }
        let item_ids: Vec<String> = headers.iter().skip(2).map(str::to_string).collect();
        let mut person_ids = Vec::new();
        let mut group_names: Vec<String> = Vec::new();
        let mut group_of_person = Vec::new();
        let mut responses = Vec::new();
        for record in rdr.records() {
            let record = record?;
            if record.len() != headers.len() {
                return Err(Error::Data(format!(
                    "row {} has {} fields, expected {}",
                    person_ids.len() + 1,
                    record.len(),
                    headers.len()
                )));
            }
            person_ids.push(record[0].to_string());
            let group = &record[1];
            let g = match group_names.iter().position(|n| n == group) {
                Some(g) => g,
                None => {
                    group_names.push(group.to_string());
                    group_names.len() - 1
                }
            };
            group_of_person.push(g);
            for cell in record.iter().skip(2) {
                responses.push(match cell.trim() {
                    "" => None,
                    "0" => Some(false),
                    "1" => Some(true),
                    other => {
                        return Err(Error::Data(format!("response cell must be 0, 1 or empty, got `{other}`")))
                    }
                });
            }
        }
        Self::new(person_ids, group_names, group_of_person, item_ids, responses)
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_csv_reader(std::io::BufReader::new(file))
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["person".to_string(), "group".to_string()];
        header.extend(self.item_ids.iter().cloned());
        w.write_record(&header)?;
        let mut record: Vec<&str> = Vec::with_capacity(header.len());
        for p in 0..self.n_persons() {
            record.clear();
            record.push(&self.person_ids[p]);
            record.push(&self.group_names[self.group_of_person[p]]);
            record.extend(self.row(p).iter().map(|cell| match cell {
                None => "",
                Some(false) => "0",
                Some(true) => "1",
            }));
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "person,group,i1,i2,i3\n\
                          p1,ref,1,0,\n\
                          p2,foc,0,1,1\n\
                          p3,ref,1,1,0\n";

    #[test]
    fn parses_csv_with_missing_cells() {
        let m = ResponseMatrix::from_csv_reader(SAMPLE.as_bytes()).unwrap();
        assert_eq!(m.n_persons(), 3);
        assert_eq!(m.n_items(), 3);
        assert_eq!(m.group_names(), &["ref", "foc"]);
        assert_eq!(m.get(0, 2), None);
        assert_eq!(m.get(1, 1), Some(true));
        assert_eq!(m.group_sizes(), vec![2, 1]);
    }

    #[test]
    fn csv_round_trip() {
        let m = ResponseMatrix::from_csv_reader(SAMPLE.as_bytes()).unwrap();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), SAMPLE);
    }

    #[test]
    fn rejects_bad_cells_and_empty_rows() {
        let bad = "person,group,i1,i2\np1,g,2,0\n";
        assert!(ResponseMatrix::from_csv_reader(bad.as_bytes()).is_err());
        let empty_row = "person,group,i1,i2\np1,g,,\n";
        assert!(ResponseMatrix::from_csv_reader(empty_row.as_bytes()).is_err());
        let one_item = "person,group,i1\np1,g,1\n";
        assert!(ResponseMatrix::from_csv_reader(one_item.as_bytes()).is_err());
    }

    #[test]
    fn reference_reordering() {
        let m = ResponseMatrix::from_csv_reader(SAMPLE.as_bytes())
            .unwrap()
            .with_reference("foc")
            .unwrap();
        assert_eq!(m.group_names(), &["foc", "ref"]);
        assert_eq!(m.group_of_person(), &[1, 0, 1]);
        assert!(m.clone().with_reference("nope").is_err());
    }
}
