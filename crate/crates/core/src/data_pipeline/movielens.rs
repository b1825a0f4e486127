use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use super::{FeatureSchema, FieldDescriptor, InteractionRecord, Vocabulary};
use crate::error::{Error, Result};

/// Ratings at or above this value become positive labels.
pub const POSITIVE_RATING: u32 = 4;

const AGE_CODES: [u32; 7] = [1, 18, 25, 35, 45, 50, 56];
const OCCUPATIONS: usize = 21;

/// MovieLens files are Latin-1 encoded.
fn read_latin1(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(bytes.iter().map(|&b| b as char).collect())
}

fn fields<'a>(line: &'a str, file: &str, lineno: usize, expected: usize) -> Result<Vec<&'a str>> {
    let parts: Vec<&str> = line.split("::").collect();
    if parts.len() != expected {
        return Err(Error::Parse {
            file: file.into(),
            line: lineno,
            message: format!("expected {expected} `::`-separated fields, found {}", parts.len()),
        });
    }
    Ok(parts)
}

fn number<T: std::str::FromStr>(s: &str, what: &str, file: &str, lineno: usize) -> Result<T> {
    s.trim().parse().map_err(|_| Error::Parse {
        file: file.into(),
        line: lineno,
        message: format!("invalid {what} `{s}`"),
    })
}

/// Release year from a title such as `Toy Story (1995)`.
fn title_year(title: &str) -> Option<u32> {
    let t = title.trim_end();
    let open = t.rfind('(')?;
    let inner = t[open + 1..].strip_suffix(')')?;
    (inner.len() == 4).then(|| inner.parse().ok()).flatten()
}

struct User {
    gender: usize,
    age: usize,
    occupation: usize,
}

struct Movie {
    genres: Vec<usize>,
    decade: u32,
}

/// Load `ratings.dat`, `users.dat`, and `movies.dat` from a MovieLens-1M
/// directory. Raw user and movie ids are kept as vocabulary indices.
pub fn load_movielens_1m(data_dir: &Path) -> Result<(Vec<InteractionRecord>, FeatureSchema)> {
    let users_path = data_dir.join("users.dat");
    let movies_path = data_dir.join("movies.dat");
    let ratings_path = data_dir.join("ratings.dat");
    let users_txt = read_latin1(&users_path)?;
    let movies_txt = read_latin1(&movies_path)?;
    let ratings_txt = read_latin1(&ratings_path)?;

    let mut users = BTreeMap::new();
    for (i, line) in users_txt.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let lineno = i + 1;
        let p = fields(line, "users.dat", lineno, 5)?;
        let id: usize = number(p[0], "user id", "users.dat", lineno)?;
        let gender = match p[1] {
            "M" => 0,
            "F" => 1,
            other => {
                return Err(Error::Parse {
                    file: "users.dat".into(),
                    line: lineno,
                    message: format!("invalid gender `{other}`"),
                })
            }
        };
        let age_code: u32 = number(p[2], "age", "users.dat", lineno)?;
        let age = AGE_CODES.iter().position(|&a| a == age_code).ok_or_else(|| Error::Parse {
            file: "users.dat".into(),
            line: lineno,
            message: format!("unknown age code {age_code}"),
        })?;
        let occupation: usize = number(p[3], "occupation", "users.dat", lineno)?;
        if occupation >= OCCUPATIONS {
            return Err(Error::Parse {
                file: "users.dat".into(),
                line: lineno,
                message: format!("occupation {occupation} out of range"),
            });
        }
        users.insert(id, User { gender, age, occupation });
    }

    let mut genres = Vocabulary::default();
    let mut movies = BTreeMap::new();
    for (i, line) in movies_txt.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let lineno = i + 1;
        let p = fields(line, "movies.dat", lineno, 3)?;
        let id: usize = number(p[0], "movie id", "movies.dat", lineno)?;
        let year = title_year(p[1]).ok_or_else(|| Error::Parse {
            file: "movies.dat".into(),
            line: lineno,
            message: format!("no release year in title `{}`", p[1]),
        })?;
        let mut g: Vec<usize> = p[2].split('|').filter(|s| !s.is_empty()).map(|s| genres.id(s)).collect();
        g.dedup();
        if g.is_empty() {
            return Err(Error::Parse {
                file: "movies.dat".into(),
                line: lineno,
                message: "movie has no genres".into(),
            });
        }
        movies.insert(id, Movie { genres: g, decade: year / 10 });
    }
    let decades: BTreeSet<u32> = movies.values().map(|m| m.decade).collect();
    let decade_index: BTreeMap<u32, usize> = decades.iter().enumerate().map(|(i, &d)| (d, i)).collect();

    let mut records = Vec::new();
    for (i, line) in ratings_txt.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let lineno = i + 1;
        let p = fields(line, "ratings.dat", lineno, 4)?;
        let user_id: usize = number(p[0], "user id", "ratings.dat", lineno)?;
        let item_id: usize = number(p[1], "movie id", "ratings.dat", lineno)?;
        let rating: u32 = number(p[2], "rating", "ratings.dat", lineno)?;
        let timestamp: i64 = number(p[3], "timestamp", "ratings.dat", lineno)?;
        let unknown = |what: &str, id: usize| Error::Parse {
            file: "ratings.dat".into(),
            line: lineno,
            message: format!("unknown {what} {id}"),
        };
        let user = users.get(&user_id).ok_or_else(|| unknown("user", user_id))?;
        let movie = movies.get(&item_id).ok_or_else(|| unknown("movie", item_id))?;
        records.push(InteractionRecord {
            user_id,
            item_id,
            user_fields: vec![user.gender, user.age, user.occupation],
            item_fields: vec![movie.genres.clone(), vec![decade_index[&movie.decade]]],
            label: u8::from(rating >= POSITIVE_RATING),
            timestamp,
        });
    }

    let schema = FeatureSchema {
        user_id: FieldDescriptor::single("user_id", users.keys().next_back().map_or(0, |&m| m + 1)),
        user_fields: vec![
            FieldDescriptor::single("gender", 2),
            FieldDescriptor::single("age", AGE_CODES.len()),
            FieldDescriptor::single("occupation", OCCUPATIONS),
        ],
        item_id: FieldDescriptor::single("item_id", movies.keys().next_back().map_or(0, |&m| m + 1)),
        item_fields: vec![
            FieldDescriptor::multi("genres", genres.len()),
            FieldDescriptor::single("decade", decade_index.len()),
        ],
        side_info: vec!["genres".into(), "decade".into()],
    };
    schema.validate()?;
    Ok((records, schema))
}
