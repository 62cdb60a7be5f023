//! Geotagged record lists (`id,path,coord_a,coord_b,role,domain[,labels]`).
//!
//! Coordinates are UTM easting/northing in meters, or latitude/longitude in
//! degrees when both cells carry a `deg` suffix (`45.07deg`). Paths are
//! relative to the manifest's directory unless absolute.

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geo::{geo_distance, Coordinate};

const HEADER: [&str; 6] = ["id", "path", "coord_a", "coord_b", "role", "domain"];
const DEGREE_SUFFIX: &str = "deg";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Gallery,
    Query,
    Train,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Domain {
    Source,
    Target,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Gallery => "gallery",
            Role::Query => "query",
            Role::Train => "train",
        })
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "gallery" => Ok(Role::Gallery),
            "query" => Ok(Role::Query),
            "train" => Ok(Role::Train),
            _ => Err(format!("unknown role {s:?}")),
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

impl FromStr for Domain {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            _ => Err(format!("unknown domain {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub id: u64,
    /// Image tensor file, as written in the manifest.
    pub path: PathBuf,
    pub coord: Coordinate,
    pub role: Role,
    pub domain: Domain,
    /// Label map, present exactly for source training records.
    pub labels: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub records: Vec<Record>,
    /// Directory relative paths are resolved against.
    pub base_dir: PathBuf,
}

fn parse_coord_cell(cell: &str) -> std::result::Result<(f64, bool), String> {
    let (num, deg) = match cell.strip_suffix(DEGREE_SUFFIX) {
        Some(n) => (n, true),
        None => (cell, false),
    };
    let v: f64 = num.trim().parse().map_err(|_| format!("bad coordinate {cell:?}"))?;
    if !v.is_finite() {
        return Err(format!("non-finite coordinate {cell:?}"));
    }
    Ok((v, deg))
}

fn coord_cells(c: &Coordinate) -> (String, String) {
    match *c {
        Coordinate::Utm { easting, northing } => (format!("{easting}"), format!("{northing}")),
        Coordinate::LatLon { lat, lon } => (format!("{lat}{DEGREE_SUFFIX}"), format!("{lon}{DEGREE_SUFFIX}")),
    }
}

impl Manifest {
    pub fn new(records: Vec<Record>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let m = Self {
            records,
            base_dir: base_dir.into(),
        };
        m.validate(Path::new("<memory>"))?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(file, base, path)
    }

    /// Parses manifest text; `origin` only labels error messages.
    pub fn parse<R: Read>(input: R, base_dir: PathBuf, origin: &Path) -> Result<Self> {
        let err = |line: u64, msg: String| Error::Manifest {
            path: origin.to_path_buf(),
            line: line as usize,
            msg,
        };
        let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(input);
        let header = reader.headers().map_err(|e| err(1, e.to_string()))?.clone();
        let fields: Vec<&str> = header.iter().map(str::trim).collect();
        let has_labels = match fields.as_slice() {
            f if f == HEADER => false,
            [rest @ .., "labels"] if rest == HEADER => true,
            _ => {
                return Err(err(
                    1,
                    format!("expected header {},labels?, got {fields:?}", HEADER.join(",")),
                ))
            }
        };
        let mut records = Vec::new();
        let mut lines = Vec::new();
        for row in reader.records() {
            let row = row.map_err(|e| err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
            let line = row.position().map_or(0, |p| p.line());
            let cells: Vec<&str> = row.iter().map(str::trim).collect();
            if cells.len() != fields.len() {
                return Err(err(
                    line,
                    format!("expected {} fields, got {}", fields.len(), cells.len()),
                ));
            }
            let id = cells[0]
                .parse::<u64>()
                .map_err(|_| err(line, format!("bad id {:?}", cells[0])))?;
            let (a, a_deg) = parse_coord_cell(cells[2]).map_err(|m| err(line, m))?;
            let (b, b_deg) = parse_coord_cell(cells[3]).map_err(|m| err(line, m))?;
            let coord = match (a_deg, b_deg) {
                (false, false) => Coordinate::utm(a, b),
                (true, true) => Coordinate::lat_lon(a, b),
                _ => return Err(err(line, "mixed coordinate conventions within one row".into())),
            };
            let role = cells[4].parse().map_err(|m| err(line, m))?;
            let domain = cells[5].parse().map_err(|m| err(line, m))?;
            let labels = (has_labels && !cells[6].is_empty()).then(|| PathBuf::from(cells[6]));
            if cells[1].is_empty() {
                return Err(err(line, "empty path".into()));
            }
            records.push(Record {
                id,
                path: PathBuf::from(cells[1]),
                coord,
                role,
                domain,
                labels,
            });
            lines.push(line);
        }
        let m = Self { records, base_dir };
        m.validate_lines(origin, &lines)?;
        Ok(m)
    }

    fn validate(&self, origin: &Path) -> Result<()> {
        let lines: Vec<u64> = (0..self.records.len() as u64).map(|i| i + 2).collect();
        self.validate_lines(origin, &lines)
    }

    fn validate_lines(&self, origin: &Path, lines: &[u64]) -> Result<()> {
        let err = |line: u64, msg: String| Error::Manifest {
            path: origin.to_path_buf(),
            line: line as usize,
            msg,
        };
        let mut seen = HashSet::new();
        let first = self.records.first().map(|r| r.coord);
        for (r, &line) in self.records.iter().zip(lines) {
            if !seen.insert(r.id) {
                return Err(err(line, format!("duplicate id {}", r.id)));
            }
            if let Some(c) = first {
                if !c.same_convention(&r.coord) {
                    return Err(err(line, "mixed coordinate conventions in one manifest".into()));
                }
            }
            let wants_labels = r.domain == Domain::Source && r.role == Role::Train;
            match (&r.labels, wants_labels) {
                (None, true) => return Err(err(line, format!("source training record {} has no label map", r.id))),
                (Some(_), false) => {
                    return Err(err(
                        line,
                        format!("record {} ({}, {}) must not carry labels", r.id, r.domain, r.role),
                    ))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        let with_labels = self.records.iter().any(|r| r.labels.is_some());
        let mut w = csv::WriterBuilder::new().flexible(true).from_writer(out);
        let mut header: Vec<&str> = HEADER.to_vec();
        if with_labels {
            header.push("labels");
        }
        w.write_record(&header).map_err(csv_io)?;
        for r in &self.records {
            let (a, b) = coord_cells(&r.coord);
            let mut row = vec![
                r.id.to_string(),
                r.path.to_string_lossy().into_owned(),
                a,
                b,
                r.role.to_string(),
                r.domain.to_string(),
            ];
            if with_labels {
                row.push(
                    r.labels
                        .as_ref()
                        .map(|p| p.to_string_lossy().into_owned())
                        .unwrap_or_default(),
                );
            }
            w.write_record(&row).map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn get(&self, id: u64) -> Option<&Record> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }

    pub fn select(&self, domain: Domain, roles: &[Role]) -> impl Iterator<Item = &Record> + '_ {
        let roles = roles.to_vec();
        self.records
            .iter()
            .filter(move |r| r.domain == domain && roles.contains(&r.role))
    }

    /// Keeps, in file order, records of `role` at least `spacing_m` from every
    /// record of that role already kept. Other roles pass through.
    pub fn subsample(&self, role: Role, spacing_m: f64) -> Result<Manifest> {
        let mut kept: Vec<Record> = Vec::new();
        for r in &self.records {
            if r.role == role {
                let mut far = true;
                for k in kept.iter().filter(|k| k.role == role) {
                    if geo_distance(&k.coord, &r.coord)? < spacing_m {
                        far = false;
                        break;
                    }
                }
                if !far {
                    continue;
                }
            }
            kept.push(r.clone());
        }
        Ok(Manifest {
            records: kept,
            base_dir: self.base_dir.clone(),
        })
    }
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Manifest> {
        Manifest::parse(text.as_bytes(), PathBuf::from("/data"), Path::new("m.csv"))
    }

    #[test]
    fn parses_valid_rows() {
        let m = parse(
            "id,path,coord_a,coord_b,role,domain,labels\n\
             1,img/1.vprt,10,20.5,train,source,lab/1.pgm\n\
             2,img/2.vprt,10,30,query,target,\n",
        )
        .unwrap();
        assert_eq!(m.records.len(), 2);
        assert_eq!(m.records[0].coord, Coordinate::utm(10.0, 20.5));
        assert_eq!(m.records[1].labels, None);
        assert_eq!(m.resolve(&m.records[0].path), PathBuf::from("/data/img/1.vprt"));
    }

    #[test]
    fn reports_line_numbers() {
        let e = parse(
            "id,path,coord_a,coord_b,role,domain\n\
             1,a,0,0,query,source\n\
             1,b,0,0,query,source\n",
        )
        .unwrap_err();
        match e {
            Error::Manifest { line, msg, .. } => {
                assert_eq!(line, 3);
                assert!(msg.contains("duplicate"));
            }
            other => panic!("{other}"),
        }
        assert!(parse("id,path,coord_a,coord_b,role,domain\n1,a,0,0,probe,source\n").is_err());
        assert!(parse("id,path,coord_a,coord_b,role,domain\n1,a,0,0,query,moon\n").is_err());
        let mixed = parse("id,path,coord_a,coord_b,role,domain\n1,a,0,0,query,source\n2,b,1deg,2deg,query,source\n");
        assert!(matches!(mixed, Err(Error::Manifest { line: 3, .. })));
        let missing = parse("id,path,coord_a,coord_b,role,domain\n1,a,0,0,train,source\n");
        assert!(matches!(missing, Err(Error::Manifest { line: 2, .. })));
    }

    #[test]
    fn lat_lon_round_trip() {
        let text = "id,path,coord_a,coord_b,role,domain\n7,x.vprt,45.0703deg,7.6869deg,gallery,target\n";
        let m = parse(text).unwrap();
        assert_eq!(m.records[0].coord, Coordinate::lat_lon(45.0703, 7.6869));
        let mut out = Vec::new();
        m.write(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), text);
    }

    #[test]
    fn subsample_by_spacing() {
        let m = parse(
            "id,path,coord_a,coord_b,role,domain\n\
             1,a,0,0,query,source\n\
             2,b,3,0,query,source\n\
             3,c,6,0,query,source\n\
             4,d,0,0,gallery,source\n",
        )
        .unwrap();
        let s = m.subsample(Role::Query, 5.0).unwrap();
        let ids: Vec<u64> = s.records.iter().map(|r| r.id).collect();
        assert_eq!(ids, [1, 3, 4]);
    }
}
