//! Mortality table ingestion and the internal interchange format.
//!
//! Input side: period 1x1 text tables (death rates, death counts, central
//! exposures) in the standard layout — two header lines, then
//! whitespace-separated columns `Year Age Female Male Total`, with `.` for
//! missing values and `110+` for the open age group. Output side: a plain
//! CSV interchange format that round-trips a [`MortalitySurface`] exactly.
//!
//! Missing-data policy: a cell enters the surface only when its log-rate is
//! well defined. Zero deaths or zero exposure make the log undefined, so
//! such cells are masked missing rather than imputed; downstream inference
//! handles the mask exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kalman::ObservationVector;

/// Gender column selector for the three-column tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gender {
    Female,
    Male,
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Gender::Female => write!(f, "female"),
            Gender::Male => write!(f, "male"),
        }
    }
}

impl FromStr for Gender {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "f" | "female" => Ok(Gender::Female),
            "m" | "male" => Ok(Gender::Male),
            other => Err(Error::Input(format!(
                "unknown gender '{other}' (expected f, m, female or male)"
            ))),
        }
    }
}

/// What a parsed table contains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableKind {
    /// Central death rates.
    Rates,
    /// Death counts.
    Deaths,
    /// Central exposures to risk.
    Exposures,
}

/// One parsed 1x1 table: values per `(year, age)` cell and gender. Ages are
/// capped upstream; here the full 0..110 range is retained.
#[derive(Debug, Clone)]
pub struct HmdTable {
    pub kind: TableKind,
    values: BTreeMap<(i32, u32), [Option<f64>; 2]>,
}

impl HmdTable {
    /// Value for a `(year, age)` cell and gender, if present and parsed.
    pub fn value(&self, year: i32, age: u32, gender: Gender) -> Option<f64> {
        self.values
            .get(&(year, age))
            .and_then(|row| row[gender_index(gender)])
    }

    /// All years with at least one parsed cell.
    pub fn years(&self) -> Vec<i32> {
        let set: BTreeSet<i32> = self.values.keys().map(|&(y, _)| y).collect();
        set.into_iter().collect()
    }

    /// Number of distinct ages present for a year.
    pub fn ages_in_year(&self, year: i32) -> usize {
        self.values.keys().filter(|&&(y, _)| y == year).count()
    }
}

fn gender_index(gender: Gender) -> usize {
    match gender {
        Gender::Female => 0,
        Gender::Male => 1,
    }
}

/// Parses a period 1x1 table.
///
/// Header lines (anything before the first row starting with a year) are
/// skipped. Each data row must carry at least five whitespace-separated
/// fields: year, age, female, male, total. `.` marks a missing value and
/// `110+` parses as age 110. Errors carry 1-based line numbers.
pub fn parse_hmd_table(text: &str, kind: TableKind) -> Result<HmdTable> {
    let mut values = BTreeMap::new();
    let mut seen_data = false;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let year = match fields[0].parse::<i32>() {
            Ok(y) => y,
            Err(_) if !seen_data => continue, // header line
            Err(_) => {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected a year, found '{}'", fields[0]),
                })
            }
        };
        seen_data = true;
        if fields.len() < 5 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 5 columns, found {}", fields.len()),
            });
        }
        let age = parse_age(fields[1]).map_err(|message| Error::Parse {
            line: line_no,
            message,
        })?;
        let female = parse_cell(fields[2]).map_err(|message| Error::Parse {
            line: line_no,
            message,
        })?;
        let male = parse_cell(fields[3]).map_err(|message| Error::Parse {
            line: line_no,
            message,
        })?;
        // The total column is validated but not stored.
        parse_cell(fields[4]).map_err(|message| Error::Parse {
            line: line_no,
            message,
        })?;
        values.insert((year, age), [female, male]);
    }
    if values.is_empty() {
        return Err(Error::Parse {
            line: 1,
            message: "no data rows found".into(),
        });
    }
    Ok(HmdTable { kind, values })
}

fn parse_age(field: &str) -> std::result::Result<u32, String> {
    let trimmed = field.strip_suffix('+').unwrap_or(field);
    trimmed
        .parse::<u32>()
        .map_err(|_| format!("unparseable age '{field}'"))
}

fn parse_cell(field: &str) -> std::result::Result<Option<f64>, String> {
    if field == "." {
        return Ok(None);
    }
    field
        .parse::<f64>()
        .map(Some)
        .map_err(|_| format!("unparseable value '{field}'"))
}

/// An age-by-year grid of log-mortality with an explicit missingness mask.
///
/// Rows index ages (consecutive integers from 0 to the cap), columns index
/// years (strictly increasing). `log_rates` holds NaN at missing cells;
/// `observed` is the authoritative mask. Death and exposure grids are kept
/// when the surface was built from counts (NaN where unknown).
#[derive(Debug, Clone)]
pub struct MortalitySurface {
    country_code: String,
    gender: Gender,
    ages: Vec<u32>,
    years: Vec<i32>,
    log_rates: DMatrix<f64>,
    observed: DMatrix<bool>,
    deaths: Option<DMatrix<f64>>,
    exposures: Option<DMatrix<f64>>,
}

impl MortalitySurface {
    /// Direct constructor for surfaces built in memory (simulation, tests).
    /// Validates the structural invariants.
    #[allow(clippy::too_many_arguments)]
    pub fn from_grids(
        country_code: impl Into<String>,
        gender: Gender,
        ages: Vec<u32>,
        years: Vec<i32>,
        log_rates: DMatrix<f64>,
        observed: DMatrix<bool>,
        deaths: Option<DMatrix<f64>>,
        exposures: Option<DMatrix<f64>>,
    ) -> Result<Self> {
        let surface = MortalitySurface {
            country_code: country_code.into(),
            gender,
            ages,
            years,
            log_rates,
            observed,
            deaths,
            exposures,
        };
        surface.validate()?;
        Ok(surface)
    }

    fn validate(&self) -> Result<()> {
        let (k, n) = (self.ages.len(), self.years.len());
        if k == 0 || n == 0 {
            return Err(Error::Input("surface must have ages and years".into()));
        }
        if self.years.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Input("years must be strictly increasing".into()));
        }
        if self.ages.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Input("ages must be strictly increasing".into()));
        }
        if self.log_rates.nrows() != k || self.log_rates.ncols() != n {
            return Err(Error::Input("log_rates grid has wrong shape".into()));
        }
        if self.observed.nrows() != k || self.observed.ncols() != n {
            return Err(Error::Input("observed mask has wrong shape".into()));
        }
        for grid in [&self.deaths, &self.exposures].into_iter().flatten() {
            if grid.nrows() != k || grid.ncols() != n {
                return Err(Error::Input("count grid has wrong shape".into()));
            }
        }
        for j in 0..n {
            for i in 0..k {
                if self.observed[(i, j)] && !self.log_rates[(i, j)].is_finite() {
                    return Err(Error::Input(format!(
                        "cell (age {}, year {}) is observed but not finite",
                        self.ages[i], self.years[j]
                    )));
                }
            }
        }
        // Where both counts are present and positive, the stored log-rate
        // must be their log-ratio.
        if let (Some(d), Some(e)) = (&self.deaths, &self.exposures) {
            for j in 0..n {
                for i in 0..k {
                    let (dv, ev) = (d[(i, j)], e[(i, j)]);
                    if self.observed[(i, j)] && dv.is_finite() && ev.is_finite() && dv > 0.0 && ev > 0.0
                    {
                        let expected = (dv / ev).ln();
                        if (self.log_rates[(i, j)] - expected).abs() > 1e-9 {
                            return Err(Error::Input(format!(
                                "log-rate at (age {}, year {}) disagrees with counts",
                                self.ages[i], self.years[j]
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn country_code(&self) -> &str {
        &self.country_code
    }

    pub fn gender(&self) -> Gender {
        self.gender
    }

    pub fn ages(&self) -> &[u32] {
        &self.ages
    }

    pub fn years(&self) -> &[i32] {
        &self.years
    }

    /// Number of age rows.
    pub fn k(&self) -> usize {
        self.ages.len()
    }

    /// Number of year columns.
    pub fn n(&self) -> usize {
        self.years.len()
    }

    pub fn log_rate(&self, age_idx: usize, year_idx: usize) -> f64 {
        self.log_rates[(age_idx, year_idx)]
    }

    pub fn is_observed(&self, age_idx: usize, year_idx: usize) -> bool {
        self.observed[(age_idx, year_idx)]
    }

    pub fn deaths(&self) -> Option<&DMatrix<f64>> {
        self.deaths.as_ref()
    }

    pub fn exposures(&self) -> Option<&DMatrix<f64>> {
        self.exposures.as_ref()
    }

    /// Total number of observed cells.
    pub fn n_observed(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }

    /// Column index of a year, if on the grid.
    pub fn year_index(&self, year: i32) -> Option<usize> {
        self.years.iter().position(|&y| y == year)
    }

    /// Ages as floating-point evaluation points for a basis.
    pub fn age_grid(&self) -> Vec<f64> {
        self.ages.iter().map(|&a| a as f64).collect()
    }

    /// Year-over-year time lags (length `n - 1`).
    pub fn lags(&self) -> Vec<f64> {
        self.years
            .windows(2)
            .map(|w| (w[1] - w[0]) as f64)
            .collect()
    }

    /// One observation vector per year, masked per cell.
    pub fn observations(&self) -> Vec<ObservationVector> {
        (0..self.n())
            .map(|j| {
                let values = DVector::from_fn(self.k(), |i, _| self.log_rates[(i, j)]);
                let mask = (0..self.k()).map(|i| self.observed[(i, j)]).collect();
                ObservationVector::new(values, mask).expect("validated surface")
            })
            .collect()
    }

    /// The surface restricted to years `<= last_year`.
    pub fn truncate_to_year(&self, last_year: i32) -> Result<MortalitySurface> {
        let n_keep = self.years.iter().filter(|&&y| y <= last_year).count();
        if n_keep == 0 {
            return Err(Error::Input(format!(
                "no years at or before {last_year} (first year is {})",
                self.years[0]
            )));
        }
        let subset = |m: &DMatrix<f64>| m.columns(0, n_keep).into_owned();
        Ok(MortalitySurface {
            country_code: self.country_code.clone(),
            gender: self.gender,
            ages: self.ages.clone(),
            years: self.years[..n_keep].to_vec(),
            log_rates: subset(&self.log_rates),
            observed: self.observed.columns(0, n_keep).into_owned(),
            deaths: self.deaths.as_ref().map(&subset),
            exposures: self.exposures.as_ref().map(&subset),
        })
    }
}

/// Builds a surface from parsed tables for one gender.
///
/// Prefers death and exposure counts when both tables are supplied (the
/// log-rate is their log-ratio); cells lacking counts fall back to the rates
/// table when present. Ages are truncated to `0..=age_cap`; years outside
/// `year_range` (inclusive, when given) are dropped. A cell is observed only
/// if its log-rate is well defined: zero deaths, zero exposure, zero rate or
/// an absent value all mask the cell.
pub fn build_surface(
    tables: &[HmdTable],
    country_code: &str,
    gender: Gender,
    age_cap: u32,
    year_range: Option<(i32, i32)>,
) -> Result<MortalitySurface> {
    let mut rates = None;
    let mut deaths = None;
    let mut exposures = None;
    for table in tables {
        let slot = match table.kind {
            TableKind::Rates => &mut rates,
            TableKind::Deaths => &mut deaths,
            TableKind::Exposures => &mut exposures,
        };
        if slot.is_some() {
            return Err(Error::Input(format!(
                "duplicate {:?} table supplied",
                table.kind
            )));
        }
        *slot = Some(table);
    }
    if rates.is_none() && (deaths.is_none() || exposures.is_none()) {
        return Err(Error::Input(
            "need a rates table or both deaths and exposures tables".into(),
        ));
    }

    let mut year_set: BTreeSet<i32> = BTreeSet::new();
    for table in [&rates, &deaths, &exposures].into_iter().flatten() {
        year_set.extend(table.years());
    }
    let years: Vec<i32> = year_set
        .into_iter()
        .filter(|&y| match year_range {
            Some((lo, hi)) => y >= lo && y <= hi,
            None => true,
        })
        .collect();
    if years.is_empty() {
        return Err(Error::Input(
            "no years remain after applying the year range".into(),
        ));
    }

    let ages: Vec<u32> = (0..=age_cap).collect();
    let (k, n) = (ages.len(), years.len());
    let mut log_rates = DMatrix::from_element(k, n, f64::NAN);
    let mut observed = DMatrix::from_element(k, n, false);
    let have_counts = deaths.is_some() && exposures.is_some();
    let mut deaths_grid = have_counts.then(|| DMatrix::from_element(k, n, f64::NAN));
    let mut exposures_grid = have_counts.then(|| DMatrix::from_element(k, n, f64::NAN));

    for (j, &year) in years.iter().enumerate() {
        for (i, &age) in ages.iter().enumerate() {
            let d = deaths.and_then(|t| t.value(year, age, gender));
            let e = exposures.and_then(|t| t.value(year, age, gender));
            if let Some(grid) = deaths_grid.as_mut() {
                if let Some(dv) = d {
                    grid[(i, j)] = dv;
                }
            }
            if let Some(grid) = exposures_grid.as_mut() {
                if let Some(ev) = e {
                    grid[(i, j)] = ev;
                }
            }
            let rate = match (d, e) {
                (Some(dv), Some(ev)) if dv > 0.0 && ev > 0.0 => Some(dv / ev),
                (Some(_), Some(_)) => None, // zero deaths or exposure: masked
                _ => rates
                    .and_then(|t| t.value(year, age, gender))
                    .filter(|&m| m > 0.0),
            };
            if let Some(m) = rate {
                log_rates[(i, j)] = m.ln();
                observed[(i, j)] = true;
            }
        }
    }

    MortalitySurface::from_grids(
        country_code,
        gender,
        ages,
        years,
        log_rates,
        observed,
        deaths_grid,
        exposures_grid,
    )
}

/// Writes the interchange CSV: a metadata comment line, a header, then one
/// row per `(year, age)` cell in year-major order. Missing numeric fields
/// are empty; floats use the shortest representation that round-trips.
pub fn write_interchange<W: Write>(surface: &MortalitySurface, mut writer: W) -> Result<()> {
    writeln!(
        writer,
        "# country={} gender={}",
        surface.country_code(),
        surface.gender()
    )?;
    writeln!(writer, "year,age,deaths,exposure,log_rate,observed")?;
    for (j, &year) in surface.years().iter().enumerate() {
        for (i, &age) in surface.ages().iter().enumerate() {
            let fmt_opt = |grid: Option<&DMatrix<f64>>| match grid {
                Some(g) if g[(i, j)].is_finite() => format!("{}", g[(i, j)]),
                _ => String::new(),
            };
            let log_rate = if surface.is_observed(i, j) {
                format!("{}", surface.log_rate(i, j))
            } else {
                String::new()
            };
            writeln!(
                writer,
                "{year},{age},{},{},{log_rate},{}",
                fmt_opt(surface.deaths()),
                fmt_opt(surface.exposures()),
                u8::from(surface.is_observed(i, j)),
            )?;
        }
    }
    Ok(())
}

/// Convenience wrapper writing the interchange CSV to a path.
pub fn write_interchange_file(surface: &MortalitySurface, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_interchange(surface, std::io::BufWriter::new(file))
}

/// Reads a surface back from the interchange CSV. Inverse of
/// [`write_interchange`]: the reconstruction is exact, including the
/// missingness mask and the presence/absence of count grids.
pub fn read_interchange<R: Read>(mut reader: R) -> Result<MortalitySurface> {
    let mut text = String::new();
    reader.read_to_string(&mut text)?;
    let mut lines = text.lines();
    let meta = lines
        .next()
        .ok_or_else(|| Error::Parse {
            line: 1,
            message: "empty interchange file".into(),
        })?
        .trim();
    let (country, gender) = parse_metadata_line(meta)?;

    let body: String = lines.collect::<Vec<_>>().join("\n");
    let mut csv_reader = csv::ReaderBuilder::new().from_reader(body.as_bytes());

    #[derive(Deserialize)]
    struct Row {
        year: i32,
        age: u32,
        deaths: Option<f64>,
        exposure: Option<f64>,
        log_rate: Option<f64>,
        observed: u8,
    }

    struct Cell {
        deaths: Option<f64>,
        exposure: Option<f64>,
        log_rate: Option<f64>,
        observed: bool,
    }
    let mut cells: BTreeMap<(i32, u32), Cell> = BTreeMap::new();
    let mut any_deaths = false;
    let mut any_exposures = false;
    for (idx, record) in csv_reader.deserialize::<Row>().enumerate() {
        let row: Row = record.map_err(|e| Error::Parse {
            line: idx + 3, // metadata + header lines precede the data
            message: e.to_string(),
        })?;
        any_deaths |= row.deaths.is_some();
        any_exposures |= row.exposure.is_some();
        cells.insert(
            (row.year, row.age),
            Cell {
                deaths: row.deaths,
                exposure: row.exposure,
                log_rate: row.log_rate,
                observed: row.observed != 0,
            },
        );
    }
    if cells.is_empty() {
        return Err(Error::Parse {
            line: 3,
            message: "no data rows in interchange file".into(),
        });
    }

    let years: Vec<i32> = cells
        .keys()
        .map(|&(y, _)| y)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let ages: Vec<u32> = cells
        .keys()
        .map(|&(_, a)| a)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let (k, n) = (ages.len(), years.len());
    let mut log_rates = DMatrix::from_element(k, n, f64::NAN);
    let mut observed = DMatrix::from_element(k, n, false);
    let mut deaths = any_deaths.then(|| DMatrix::from_element(k, n, f64::NAN));
    let mut exposures = any_exposures.then(|| DMatrix::from_element(k, n, f64::NAN));
    for (j, &year) in years.iter().enumerate() {
        for (i, &age) in ages.iter().enumerate() {
            if let Some(cell) = cells.get(&(year, age)) {
                if let Some(lr) = cell.log_rate {
                    log_rates[(i, j)] = lr;
                }
                observed[(i, j)] = cell.observed;
                if let (Some(grid), Some(v)) = (deaths.as_mut(), cell.deaths) {
                    grid[(i, j)] = v;
                }
                if let (Some(grid), Some(v)) = (exposures.as_mut(), cell.exposure) {
                    grid[(i, j)] = v;
                }
            }
        }
    }

    MortalitySurface::from_grids(
        country, gender, ages, years, log_rates, observed, deaths, exposures,
    )
}

/// Convenience wrapper reading the interchange CSV from a path.
pub fn read_interchange_file(path: &Path) -> Result<MortalitySurface> {
    let file = std::fs::File::open(path)?;
    read_interchange(std::io::BufReader::new(file))
}

fn parse_metadata_line(line: &str) -> Result<(String, Gender)> {
    let stripped = line.strip_prefix('#').ok_or_else(|| Error::Parse {
        line: 1,
        message: "expected metadata comment line starting with '#'".into(),
    })?;
    let mut country = None;
    let mut gender = None;
    for token in stripped.split_whitespace() {
        if let Some(v) = token.strip_prefix("country=") {
            country = Some(v.to_string());
        } else if let Some(v) = token.strip_prefix("gender=") {
            gender = Some(v.parse::<Gender>()?);
        }
    }
    match (country, gender) {
        (Some(c), Some(g)) => Ok((c, g)),
        _ => Err(Error::Parse {
            line: 1,
            message: "metadata line must carry country= and gender=".into(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const RATES_FIXTURE: &str = "\
Testland, Death rates (period 1x1),\tLast modified: 01 Jan 2026;  Methods Protocol: v6 (2017)

  Year          Age             Female            Male           Total
  1933           0             0.062463          0.078204        0.070504
  1933           1             0.011234          0.012345        0.011789
  1933           2             .                 0.005678        0.005678
  1934           0             0.060000          0.076000        0.068000
  1934           1             0.010000          0.011500        0.010750
  1934           2             0.004000          0.005000        0.004500
";

    fn counts_fixture() -> (String, String) {
        // Deaths and exposures consistent with RATES_FIXTURE to 1e-6
        // relative: rate = deaths / exposure by construction.
        let mut deaths = String::from("Testland, Deaths (period 1x1)\n\n Year Age Female Male Total\n");
        let mut exposures =
            String::from("Testland, Exposure to risk (period 1x1)\n\n Year Age Female Male Total\n");
        let rows = [
            (1933, 0, 0.062463, 0.078204),
            (1933, 1, 0.011234, 0.012345),
            (1934, 0, 0.060000, 0.076000),
            (1934, 1, 0.010000, 0.011500),
            (1934, 2, 0.004000, 0.005000),
        ];
        for (year, age, f_rate, m_rate) in rows {
            let (ef, em) = (100_000.0, 98_000.0);
            deaths.push_str(&format!(
                "{year} {age} {:.2} {:.2} {:.2}\n",
                f_rate * ef,
                m_rate * em,
                f_rate * ef + m_rate * em
            ));
            exposures.push_str(&format!("{year} {age} {ef:.2} {em:.2} {:.2}\n", ef + em));
        }
        (deaths, exposures)
    }

    #[test]
    fn parses_rates_fixture_cells() {
        let table = parse_hmd_table(RATES_FIXTURE, TableKind::Rates).unwrap();
        assert_eq!(table.value(1933, 0, Gender::Female), Some(0.062463));
        assert_eq!(table.value(1933, 0, Gender::Male), Some(0.078204));
        // "." leaves the female cell missing while the male cell parses.
        assert_eq!(table.value(1933, 2, Gender::Female), None);
        assert_eq!(table.value(1933, 2, Gender::Male), Some(0.005678));
        assert_eq!(table.years(), vec![1933, 1934]);
    }

    #[test]
    fn parses_open_age_group_and_counts_rows() {
        let text = "\
Somewhere, Death rates (period 1x1)

 Year Age Female Male Total
 2000 109 0.5 0.6 0.55
 2000 110+ 0.7 0.8 0.75
";
        let table = parse_hmd_table(text, TableKind::Rates).unwrap();
        assert_eq!(table.value(2000, 110, Gender::Female), Some(0.7));
        assert_eq!(table.ages_in_year(2000), 2);
    }

    #[test]
    fn full_age_range_is_retained_before_capping() {
        let mut text = String::from("X, Death rates (period 1x1)\n\n Year Age Female Male Total\n");
        for age in 0..=109 {
            text.push_str(&format!(" 1950 {age} 0.01 0.01 0.01\n"));
        }
        text.push_str(" 1950 110+ 0.9 0.9 0.9\n");
        let table = parse_hmd_table(&text, TableKind::Rates).unwrap();
        assert_eq!(table.ages_in_year(1950), 111);
    }

    #[test]
    fn malformed_rows_carry_line_numbers() {
        let bad_value = "Header\n\n Year Age Female Male Total\n 1950 0 abc 0.1 0.1\n";
        match parse_hmd_table(bad_value, TableKind::Rates) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
        let short_row = "Header\n\n Year Age Female Male Total\n 1950 0 0.1\n";
        match parse_hmd_table(short_row, TableKind::Rates) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
        let bad_year_after_data =
            "Header\n\n Year Age Female Male Total\n 1950 0 0.1 0.1 0.1\n 19x0 1 0.1 0.1 0.1\n";
        assert!(matches!(
            parse_hmd_table(bad_year_after_data, TableKind::Rates),
            Err(Error::Parse { line: 5, .. })
        ));
    }

    #[test]
    fn surface_from_rates_applies_missing_policy() {
        let table = parse_hmd_table(RATES_FIXTURE, TableKind::Rates).unwrap();
        let surface = build_surface(&[table], "TST", Gender::Female, 2, None).unwrap();
        assert_eq!(surface.k(), 3);
        assert_eq!(surface.n(), 2);
        assert!(surface.is_observed(0, 0));
        assert!((surface.log_rate(0, 0) - 0.062463f64.ln()).abs() < 1e-12);
        // The "." cell is missing.
        assert!(!surface.is_observed(2, 0));
        assert!(surface.log_rate(2, 0).is_nan());
        assert_eq!(surface.years(), &[1933, 1934]);
        assert_eq!(surface.lags(), vec![1.0]);
    }

    #[test]
    fn age_cap_yields_expected_row_count() {
        let mut text = String::from("X, Death rates (period 1x1)\n\n Year Age Female Male Total\n");
        for age in 0..=110 {
            text.push_str(&format!(" 1950 {age} 0.01 0.01 0.01\n"));
        }
        let table = parse_hmd_table(&text, TableKind::Rates).unwrap();
        let surface = build_surface(&[table], "X", Gender::Female, 100, None).unwrap();
        assert_eq!(surface.k(), 101);
        assert_eq!(surface.ages().last(), Some(&100));
    }

    #[test]
    fn counts_take_precedence_and_agree_with_rates() {
        let (deaths_text, exposures_text) = counts_fixture();
        let rates = parse_hmd_table(RATES_FIXTURE, TableKind::Rates).unwrap();
        let deaths = parse_hmd_table(&deaths_text, TableKind::Deaths).unwrap();
        let exposures = parse_hmd_table(&exposures_text, TableKind::Exposures).unwrap();

        let from_counts = build_surface(
            &[deaths, exposures],
            "TST",
            Gender::Female,
            2,
            None,
        )
        .unwrap();
        let from_rates = build_surface(&[rates], "TST", Gender::Female, 2, None).unwrap();
        for j in 0..from_counts.n() {
            for i in 0..from_counts.k() {
                if from_counts.is_observed(i, j) && from_rates.is_observed(i, j) {
                    let rel = (from_counts.log_rate(i, j) - from_rates.log_rate(i, j)).abs()
                        / from_rates.log_rate(i, j).abs();
                    assert!(rel < 1e-6, "cell ({i}, {j}) disagrees by {rel}");
                }
            }
        }
        assert!(from_counts.deaths().is_some());
        assert!(from_counts.exposures().is_some());
    }

    #[test]
    fn zero_deaths_cells_are_masked_not_imputed() {
        let deaths = parse_hmd_table(
            "D\n\n Year Age Female Male Total\n 1950 0 0.00 1.00 1.00\n 1950 1 5.00 4.00 9.00\n",
            TableKind::Deaths,
        )
        .unwrap();
        let exposures = parse_hmd_table(
            "E\n\n Year Age Female Male Total\n 1950 0 1000 1000 2000\n 1950 1 1000 1000 2000\n",
            TableKind::Exposures,
        )
        .unwrap();
        let surface = build_surface(&[deaths, exposures], "X", Gender::Female, 1, None).unwrap();
        assert!(!surface.is_observed(0, 0));
        assert!(surface.is_observed(1, 0));
        // The death count itself is still recorded.
        assert_eq!(surface.deaths().unwrap()[(0, 0)], 0.0);
    }

    #[test]
    fn year_range_filters_and_truncation_works() {
        let table = parse_hmd_table(RATES_FIXTURE, TableKind::Rates).unwrap();
        let surface =
            build_surface(std::slice::from_ref(&table), "TST", Gender::Male, 2, Some((1934, 1934)))
                .unwrap();
        assert_eq!(surface.years(), &[1934]);
        assert!(matches!(
            build_surface(std::slice::from_ref(&table), "TST", Gender::Male, 2, Some((1800, 1801))),
            Err(Error::Input(_))
        ));

        let full = build_surface(&[table], "TST", Gender::Male, 2, None).unwrap();
        let truncated = full.truncate_to_year(1933).unwrap();
        assert_eq!(truncated.years(), &[1933]);
        assert!(matches!(
            full.truncate_to_year(1900),
            Err(Error::Input(_))
        ));
    }

    fn bitwise_equal(a: &MortalitySurface, b: &MortalitySurface) -> bool {
        let grids_equal = |x: &DMatrix<f64>, y: &DMatrix<f64>| {
            x.shape() == y.shape()
                && x.iter()
                    .zip(y.iter())
                    .all(|(u, v)| u.to_bits() == v.to_bits())
        };
        let opt_equal = |x: Option<&DMatrix<f64>>, y: Option<&DMatrix<f64>>| match (x, y) {
            (None, None) => true,
            (Some(u), Some(v)) => grids_equal(u, v),
            _ => false,
        };
        a.country_code() == b.country_code()
            && a.gender() == b.gender()
            && a.ages() == b.ages()
            && a.years() == b.years()
            && grids_equal(&a.log_rates, &b.log_rates)
            && a.observed == b.observed
            && opt_equal(a.deaths(), b.deaths())
            && opt_equal(a.exposures(), b.exposures())
    }

    #[test]
    fn interchange_round_trip_is_exact() {
        let (deaths_text, exposures_text) = counts_fixture();
        let deaths = parse_hmd_table(&deaths_text, TableKind::Deaths).unwrap();
        let exposures = parse_hmd_table(&exposures_text, TableKind::Exposures).unwrap();
        let surface = build_surface(&[deaths, exposures], "TST", Gender::Female, 2, None).unwrap();

        let mut buffer = Vec::new();
        write_interchange(&surface, &mut buffer).unwrap();
        let recovered = read_interchange(buffer.as_slice()).unwrap();
        assert!(bitwise_equal(&surface, &recovered));

        // Writing the recovered surface again produces identical bytes.
        let mut buffer2 = Vec::new();
        write_interchange(&recovered, &mut buffer2).unwrap();
        assert_eq!(buffer, buffer2);
    }

    #[test]
    fn interchange_round_trip_without_counts() {
        let table = parse_hmd_table(RATES_FIXTURE, TableKind::Rates).unwrap();
        let surface = build_surface(&[table], "TST", Gender::Male, 2, None).unwrap();
        let mut buffer = Vec::new();
        write_interchange(&surface, &mut buffer).unwrap();
        let recovered = read_interchange(buffer.as_slice()).unwrap();
        assert!(bitwise_equal(&surface, &recovered));
        assert!(recovered.deaths().is_none());
    }

    #[test]
    fn gender_parsing_accepts_short_and_long_forms() {
        assert_eq!("f".parse::<Gender>().unwrap(), Gender::Female);
        assert_eq!("MALE".parse::<Gender>().unwrap(), Gender::Male);
        assert!("x".parse::<Gender>().is_err());
    }
}
