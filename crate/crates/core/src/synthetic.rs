//! Template-generated code/query pairs for demos and desk-scale training runs.
//!
//! Each pair combines an action with an object. The query names both in plain
//! words; the code spells them as an identifier and uses them in a small body,
//! so lexical overlap exists but is partial.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::CodeQueryPair;

struct Action {
    words: &'static [&'static str],
    python: &'static str,
    java: &'static str,
}

struct Object {
    words: &'static [&'static str],
    ident: &'static str,
    java_type: &'static str,
}

// `{o}` is the object identifier, `{f}` the function name, `{t}` the Java type.
const ACTIONS: &[Action] = &[
    Action {
        words: &["read"],
        python: "def {f} ( path ) : with open ( path ) as fh : {o} = fh . read ( ) return {o}",
        java: "public static {t} {f} ( String path ) throws IOException { return Files . readString ( Path . of ( path ) ) ; }",
    },
    Action {
        words: &["write"],
        python: "def {f} ( path , {o} ) : with open ( path , 'w' ) as fh : fh . write ( str ( {o} ) )",
        java: "public static void {f} ( String path , {t} {o} ) throws IOException { Files . writeString ( Path . of ( path ) , String . valueOf ( {o} ) ) ; }",
    },
    Action {
        words: &["sort"],
        python: "def {f} ( {o} ) : return sorted ( {o} , key = lambda x : x )",
        java: "public static {t} {f} ( {t} {o} ) { Collections . sort ( {o} ) ; return {o} ; }",
    },
    Action {
        words: &["count"],
        python: "def {f} ( {o} ) : total = 0 for item in {o} : total += 1 return total",
        java: "public static int {f} ( {t} {o} ) { int total = 0 ; for ( Object item : {o} ) { total ++ ; } return total ; }",
    },
    Action {
        words: &["filter"],
        python: "def {f} ( {o} , pred ) : return [ x for x in {o} if pred ( x ) ]",
        java: "public static {t} {f} ( {t} {o} , Predicate pred ) { return {o} . stream ( ) . filter ( pred ) . collect ( Collectors . toList ( ) ) ; }",
    },
    Action {
        words: &["parse"],
        python: "def {f} ( text ) : {o} = json . loads ( text ) return {o}",
        java: "public static {t} {f} ( String text ) { return mapper . readValue ( text , {t} . class ) ; }",
    },
    Action {
        words: &["convert"],
        python: "def {f} ( value ) : {o} = bytes . fromhex ( value ) return {o}",
        java: "public static {t} {f} ( String value ) { return {t} . valueOf ( value ) ; }",
    },
    Action {
        words: &["merge"],
        python: "def {f} ( left , right ) : {o} = list ( left ) {o} . extend ( right ) return {o}",
        java: "public static {t} {f} ( {t} left , {t} right ) { left . addAll ( right ) ; return left ; }",
    },
    Action {
        words: &["validate"],
        python: "def {f} ( {o} ) : if not {o} : raise ValueError ( 'invalid' ) return True",
        java: "public static boolean {f} ( {t} {o} ) { if ( {o} == null ) { throw new IllegalArgumentException ( ) ; } return true ; }",
    },
    Action {
        words: &["reverse"],
        python: "def {f} ( {o} ) : return {o} [ : : - 1 ]",
        java: "public static {t} {f} ( {t} {o} ) { Collections . reverse ( {o} ) ; return {o} ; }",
    },
    Action {
        words: &["copy"],
        python: "def {f} ( {o} ) : return copy . deepcopy ( {o} )",
        java: "public static {t} {f} ( {t} {o} ) { return new ArrayList < > ( {o} ) ; }",
    },
    Action {
        words: &["compress"],
        python: "def {f} ( {o} ) : return zlib . compress ( {o} )",
        java: "public static byte [ ] {f} ( {t} {o} ) { Deflater d = new Deflater ( ) ; d . setInput ( {o} ) ; return d . finish ( ) ; }",
    },
    Action {
        words: &["hash"],
        python: "def {f} ( {o} ) : return hashlib . sha256 ( {o} ) . hexdigest ( )",
        java: "public static String {f} ( {t} {o} ) { return DigestUtils . sha256Hex ( {o} ) ; }",
    },
    Action {
        words: &["print"],
        python: "def {f} ( {o} ) : for x in {o} : print ( x )",
        java: "public static void {f} ( {t} {o} ) { System . out . println ( {o} ) ; }",
    },
    Action {
        words: &["remove", "duplicate"],
        python: "def {f} ( {o} ) : seen = set ( ) return [ x for x in {o} if not ( x in seen or seen . add ( x ) ) ]",
        java: "public static {t} {f} ( {t} {o} ) { return new ArrayList < > ( new LinkedHashSet < > ( {o} ) ) ; }",
    },
    Action {
        words: &["find", "max"],
        python: "def {f} ( {o} ) : best = None for x in {o} : if best is None or x > best : best = x return best",
        java: "public static Object {f} ( {t} {o} ) { return Collections . max ( {o} ) ; }",
    },
    Action {
        words: &["split"],
        python: "def {f} ( {o} , size ) : return [ {o} [ i : i + size ] for i in range ( 0 , len ( {o} ) , size ) ]",
        java: "public static List {f} ( {t} {o} , int size ) { return Lists . partition ( {o} , size ) ; }",
    },
    Action {
        words: &["encode"],
        python: "def {f} ( {o} ) : return base64 . b64encode ( {o} ) . decode ( 'ascii' )",
        java: "public static String {f} ( {t} {o} ) { return Base64 . getEncoder ( ) . encodeToString ( {o} ) ; }",
    },
    Action {
        words: &["load"],
        python: "def {f} ( path ) : with open ( path , 'rb' ) as fh : return pickle . load ( fh )",
        java: "public static {t} {f} ( String path ) throws IOException { return loader . load ( path ) ; }",
    },
    Action {
        words: &["flatten"],
        python: "def {f} ( {o} ) : return [ y for x in {o} for y in x ]",
        java: "public static {t} {f} ( List < {t} > {o} ) { return {o} . stream ( ) . flatMap ( List :: stream ) . collect ( Collectors . toList ( ) ) ; }",
    },
];

const OBJECTS: &[Object] = &[
    Object {
        words: &["csv", "rows"],
        ident: "csv_rows",
        java_type: "List",
    },
    Object {
        words: &["hex", "string"],
        ident: "hex_string",
        java_type: "String",
    },
    Object {
        words: &["byte", "array"],
        ident: "byte_array",
        java_type: "byte[]",
    },
    Object {
        words: &["json", "config"],
        ident: "json_config",
        java_type: "Map",
    },
    Object {
        words: &["user", "list"],
        ident: "user_list",
        java_type: "List",
    },
    Object {
        words: &["log", "lines"],
        ident: "log_lines",
        java_type: "List",
    },
    Object {
        words: &["word", "counts"],
        ident: "word_counts",
        java_type: "Map",
    },
    Object {
        words: &["matrix"],
        ident: "matrix",
        java_type: "double[][]",
    },
    Object {
        words: &["url", "params"],
        ident: "url_params",
        java_type: "Map",
    },
    Object {
        words: &["file", "names"],
        ident: "file_names",
        java_type: "List",
    },
    Object {
        words: &["email", "address"],
        ident: "email_address",
        java_type: "String",
    },
    Object {
        words: &["date", "string"],
        ident: "date_string",
        java_type: "String",
    },
    Object {
        words: &["xml", "document"],
        ident: "xml_document",
        java_type: "Document",
    },
    Object {
        words: &["image", "pixels"],
        ident: "image_pixels",
        java_type: "int[]",
    },
    Object {
        words: &["http", "headers"],
        ident: "http_headers",
        java_type: "Map",
    },
    Object {
        words: &["stack", "trace"],
        ident: "stack_trace",
        java_type: "String",
    },
    Object {
        words: &["sql", "results"],
        ident: "sql_results",
        java_type: "ResultSet",
    },
    Object {
        words: &["tree", "nodes"],
        ident: "tree_nodes",
        java_type: "List",
    },
    Object {
        words: &["price", "table"],
        ident: "price_table",
        java_type: "Map",
    },
    Object {
        words: &["queue", "items"],
        ident: "queue_items",
        java_type: "Queue",
    },
    Object {
        words: &["text", "buffer"],
        ident: "text_buffer",
        java_type: "StringBuilder",
    },
    Object {
        words: &["sensor", "readings"],
        ident: "sensor_readings",
        java_type: "double[]",
    },
    Object {
        words: &["order", "ids"],
        ident: "order_ids",
        java_type: "Set",
    },
    Object {
        words: &["color", "palette"],
        ident: "color_palette",
        java_type: "List",
    },
    Object {
        words: &["session", "tokens"],
        ident: "session_tokens",
        java_type: "Set",
    },
    Object {
        words: &["graph", "edges"],
        ident: "graph_edges",
        java_type: "List",
    },
    Object {
        words: &["audio", "samples"],
        ident: "audio_samples",
        java_type: "float[]",
    },
    Object {
        words: &["zip", "archive"],
        ident: "zip_archive",
        java_type: "ZipFile",
    },
];

const PREFIXES: &[&[&str]] = &[&[], &[], &["how", "to"], &["helper", "to"], &["function", "that"]];
const FILLERS: &[&[&str]] = &[&[], &[], &["the"], &["a", "given"], &["all"]];

pub const LANGUAGES: [&str; 2] = ["python", "java"];

/// Number of distinct (action, object, language) combinations.
pub fn capacity() -> usize {
    ACTIONS.len() * OBJECTS.len() * LANGUAGES.len()
}

fn camel(ident: &str) -> String {
    let mut out = String::with_capacity(ident.len());
    let mut upper = false;
    for ch in ident.chars() {
        if ch == '_' {
            upper = true;
        } else if upper {
            out.extend(ch.to_uppercase());
            upper = false;
        } else {
            out.push(ch);
        }
    }
    out
}

fn render(action: &Action, object: &Object, language: &str) -> String {
    let verb = action.words.join("_");
    let (template, fname, obj) = if language == "java" {
        (
            action.java,
            camel(&format!("{verb}_{}", object.ident)),
            camel(object.ident),
        )
    } else {
        (
            action.python,
            format!("{verb}_{}", object.ident),
            object.ident.to_owned(),
        )
    };
    template
        .replace("{f}", &fname)
        .replace("{o}", &obj)
        .replace("{t}", object.java_type)
}

fn make_pair<R: Rng + ?Sized>(
    id: String,
    action: &Action,
    object: &Object,
    language: &str,
    rng: &mut R,
) -> CodeQueryPair {
    let raw = render(action, object, language);
    let code_tokens = raw.split_whitespace().map(str::to_owned).collect();
    let mut query: Vec<String> = Vec::new();
    query.extend(PREFIXES.choose(rng).unwrap().iter().map(|w| w.to_string()));
    query.extend(action.words.iter().map(|w| w.to_string()));
    query.extend(FILLERS.choose(rng).unwrap().iter().map(|w| w.to_string()));
    query.extend(object.words.iter().map(|w| w.to_string()));
    CodeQueryPair {
        id,
        language: language.to_owned(),
        code_tokens,
        query_tokens: query,
        raw_code: Some(raw),
        source: Some(format!(
            "synthetic/{language}/{}_{}",
            action.words.join("_"),
            object.ident
        )),
    }
}

/// `n` distinct pairs in a seed-determined order. Panics if `n` exceeds [`capacity`].
pub fn generate(n: usize, seed: u64) -> Vec<CodeQueryPair> {
    assert!(
        n <= capacity(),
        "requested {n} pairs, only {} distinct combinations",
        capacity()
    );
    let mut combos: Vec<(usize, usize, usize)> = (0..ACTIONS.len())
        .flat_map(|a| (0..OBJECTS.len()).flat_map(move |o| (0..LANGUAGES.len()).map(move |l| (a, o, l))))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    combos.shuffle(&mut rng);
    combos
        .into_iter()
        .take(n)
        .enumerate()
        .map(|(i, (a, o, l))| make_pair(format!("syn:{i}"), &ACTIONS[a], &OBJECTS[o], LANGUAGES[l], &mut rng))
        .collect()
}

/// The 100-pair demo set. It always contains "convert hex string to byte
/// array" and "read csv rows".
pub fn demo() -> Vec<CodeQueryPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut pairs = vec![
        CodeQueryPair {
            id: "demo:0".into(),
            language: "python".into(),
            code_tokens: "def hex_to_bytes ( hex_string ) : byte_array = bytes . fromhex ( hex_string ) return byte_array"
                .split_whitespace()
                .map(str::to_owned)
                .collect(),
            query_tokens: ["convert", "hex", "string", "to", "byte", "array"].map(String::from).to_vec(),
            raw_code: Some(
                "def hex_to_bytes(hex_string):\n    byte_array = bytes.fromhex(hex_string)\n    return byte_array\n".into(),
            ),
            source: Some("demo/python/hex_to_bytes.py".into()),
        },
        CodeQueryPair {
            id: "demo:1".into(),
            language: "python".into(),
            code_tokens: "def read_csv_rows ( path ) : with open ( path ) as fh : csv_rows = list ( csv . reader ( fh ) ) return csv_rows"
                .split_whitespace()
                .map(str::to_owned)
                .collect(),
            query_tokens: ["read", "csv", "rows"].map(String::from).to_vec(),
            raw_code: Some(
                "def read_csv_rows(path):\n    with open(path) as fh:\n        csv_rows = list(csv.reader(fh))\n    return csv_rows\n"
                    .into(),
            ),
            source: Some("demo/python/read_csv_rows.py".into()),
        },
    ];
    let skip = |a: &Action, o: &Object| {
        (a.words == ["convert"] && o.ident == "hex_string") || (a.words == ["read"] && o.ident == "csv_rows")
    };
    let mut combos: Vec<(usize, usize, usize)> = (0..ACTIONS.len())
        .flat_map(|a| (0..OBJECTS.len()).flat_map(move |o| (0..LANGUAGES.len()).map(move |l| (a, o, l))))
        .filter(|&(a, o, l)| !(l == 0 && skip(&ACTIONS[a], &OBJECTS[o])))
        .collect();
    combos.shuffle(&mut rng);
    for (a, o, l) in combos.into_iter().take(98) {
        let id = format!("demo:{}", pairs.len());
        pairs.push(make_pair(id, &ACTIONS[a], &OBJECTS[o], LANGUAGES[l], &mut rng));
    }
    pairs
}
