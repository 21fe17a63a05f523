//! Text map files: one row per line, `#` wall, `.` free.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// 5×5 room with a 3×3 free interior (36 poses).
pub const SMALL_MAP: &str = "\
#####
#...#
#...#
#...#
#####
";

/// 9×9 room with an L-shaped block and a pillar: 45 free cells, 180 poses.
pub const DEFAULT_MAP: &str = "\
#########
#.......#
#.......#
#..##...#
#...#...#
#.......#
#.....#.#
#.......#
#########
";

/// Cell layout parsed from a map file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellMap {
    pub width: usize,
    pub height: usize,
    pub walls: Vec<bool>,
}

impl CellMap {
    pub fn parse(text: &str) -> Result<Self> {
        let rows: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        if rows.is_empty() {
            return Err(Error::Map("empty map".into()));
        }
        let width = rows[0].trim_end().chars().count();
        let height = rows.len();
        let mut walls = Vec::with_capacity(width * height);
        for (y, row) in rows.iter().enumerate() {
            let row = row.trim_end();
            if row.chars().count() != width {
                return Err(Error::Map(format!(
                    "row {y} has {} cells, expected {width}",
                    row.chars().count()
                )));
            }
            for (x, c) in row.chars().enumerate() {
                match c {
                    '#' => walls.push(true),
                    '.' => walls.push(false),
                    other => {
                        return Err(Error::Map(format!(
                            "unexpected character {other:?} at ({x}, {y})"
                        )))
                    }
                }
            }
        }
        let map = Self {
            width,
            height,
            walls,
        };
        map.validate()?;
        Ok(map)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Map(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.walls.len() != self.width * self.height {
            return Err(Error::Map("wall mask size does not match dimensions".into()));
        }
        for y in 0..self.height {
            for x in 0..self.width {
                let border = x == 0 || y == 0 || x + 1 == self.width || y + 1 == self.height;
                if border && !self.walls[y * self.width + x] {
                    return Err(Error::Map(format!("border cell ({x}, {y}) is not a wall")));
                }
            }
        }
        // one free cell already yields four distinct poses
        if self.walls.iter().all(|w| *w) {
            return Err(Error::Map("map has no free cells".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity((self.width + 1) * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                s.push(if self.walls[y * self.width + x] { '#' } else { '.' });
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_shipped_maps() {
        let small = CellMap::parse(SMALL_MAP).unwrap();
        assert_eq!((small.width, small.height), (5, 5));
        assert_eq!(small.walls.iter().filter(|w| !**w).count(), 9);
        let big = CellMap::parse(DEFAULT_MAP).unwrap();
        assert_eq!(big.walls.iter().filter(|w| !**w).count(), 45);
        assert_eq!(CellMap::parse(&big.to_text()).unwrap(), big);
    }

    #[test]
    fn rejects_open_border() {
        let err = CellMap::parse("###\n#..\n###\n").unwrap_err();
        assert!(err.to_string().contains("border"));
    }

    #[test]
    fn rejects_ragged_rows_and_bad_chars() {
        assert!(CellMap::parse("###\n#.#\n##\n").is_err());
        assert!(CellMap::parse("###\n#x#\n###\n").is_err());
    }
}
